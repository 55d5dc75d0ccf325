//! Bilinear sampling kernels shared by every raster type.
//!
//! All rasters are row-major with interleaved channels. Coordinates are in
//! pixel units with pixel centers at integers; anything outside
//! `[0, w-1] x [0, h-1]` is clamped to the border and reported as out of bounds.

#[derive(Clone, Copy, Debug)]
pub(crate) struct Grid<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: &'a [f64],
}

/// Interpolation taps for one sample location.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the unclamped coordinate moves the sample (zero derivative when clamped).
    pub live_x: bool,
    pub live_y: bool,
    pub in_bounds: bool,
}

impl Taps {
    #[inline]
    pub fn new(height: usize, width: usize, x: f64, y: f64) -> Taps {
        let xmax = (width - 1) as f64;
        let ymax = (height - 1) as f64;
        let live_x = (0.0..=xmax).contains(&x);
        let live_y = (0.0..=ymax).contains(&y);
        let xc = x.clamp(0.0, xmax);
        let yc = y.clamp(0.0, ymax);
        let x0 = (xc.floor() as usize).min(width - 2);
        let y0 = (yc.floor() as usize).min(height - 2);
        Taps {
            x0,
            y0,
            x1: x0 + 1,
            y1: y0 + 1,
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            live_x,
            live_y,
            in_bounds: live_x && live_y,
        }
    }
}

impl<'a> Grid<'a> {
    #[inline]
    fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Writes the interpolated channels into `out`; returns the in-bounds flag.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        let t = Taps::new(self.height, self.width, x, y);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.at(t.x0, t.y0, c) * (1.0 - t.fx) + self.at(t.x1, t.y0, c) * t.fx;
            let bot = self.at(t.x0, t.y1, c) * (1.0 - t.fx) + self.at(t.x1, t.y1, c) * t.fx;
            *o = top * (1.0 - t.fy) + bot * t.fy;
        }
        t.in_bounds
    }

    /// Like [`Grid::sample`] but also returns the partial derivatives of each
    /// channel with respect to the sample coordinates.
    #[inline]
    pub fn sample_with_grad(
        &self,
        x: f64,
        y: f64,
        out: &mut [f64],
        dx: &mut [f64],
        dy: &mut [f64],
    ) -> bool {
        let t = Taps::new(self.height, self.width, x, y);
        for c in 0..self.channels {
            let v00 = self.at(t.x0, t.y0, c);
            let v10 = self.at(t.x1, t.y0, c);
            let v01 = self.at(t.x0, t.y1, c);
            let v11 = self.at(t.x1, t.y1, c);
            let top = v00 + (v10 - v00) * t.fx;
            let bot = v01 + (v11 - v01) * t.fx;
            out[c] = top + (bot - top) * t.fy;
            dx[c] = if t.live_x {
                (v10 - v00) * (1.0 - t.fy) + (v11 - v01) * t.fy
            } else {
                0.0
            };
            dy[c] = if t.live_y { bot - top } else { 0.0 };
        }
        t.in_bounds
    }
}

#[inline]
pub(crate) fn in_bounds(height: usize, width: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

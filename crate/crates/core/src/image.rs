//! Dense image rasters and the differentiable low-level operations the losses
//! are built from: bilinear sampling, forward-difference gradients, a soft
//! census transform and a windowed SSIM dissimilarity.

use crate::error::{ensure_same_shape, Error, Result};
use crate::sampling::Grid;

/// ITU-R 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Stabilizers for SSIM with a dynamic range of 1.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// An `height x width x channels` raster, row-major with interleaved channels.
/// Values are nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

pub(crate) fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidDimensions(format!(
            "{height}x{width}: rasters need at least 2x2 pixels"
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        check_dims(height, width)?;
        if channels == 0 {
            return Err(Error::InvalidDimensions("zero channels".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidDimensions(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        check_finite("image", &data)?;
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Image> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-pixel, per-channel function `f(x, y, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Image> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), height * width * channels);
        Image { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub(crate) fn grid(&self) -> Grid<'_> {
        Grid { height: self.height, width: self.width, channels: self.channels, data: &self.data }
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::from_parts(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Bilinear interpolation at `(x, y)`. Coordinates outside the image are
    /// clamped to the border and flagged with `in_bounds = false`.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Result<(Vec<f64>, bool)> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite(format!("sample coordinate ({x}, {y})")));
        }
        let mut out = vec![0.0; self.channels];
        let inside = self.grid().sample(x, y, &mut out);
        Ok((out, inside))
    }

    /// Single-channel luminance. Three-channel images use the 601 weights;
    /// single-channel images are returned unchanged.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| {
                if px.len() == 3 {
                    px.iter().zip(LUMA_WEIGHTS).map(|(v, w)| v * w).sum()
                } else {
                    px.iter().sum::<f64>() / px.len() as f64
                }
            })
            .collect();
        Image::from_parts(self.height, self.width, 1, data)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Per-pixel soft census descriptors of length `(2r+1)^2 - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorImage {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub(crate) fn grid(&self) -> Grid<'_> {
        Grid { height: self.height, width: self.width, channels: self.dim, data: &self.data }
    }
}

/// Smooth odd squashing: `s(0) = 0`, `s(+-inf) = +-1`.
#[inline]
fn squash(z: f64) -> f64 {
    z / (1.0 + z * z).sqrt()
}

/// Forward differences along x and y. The last column of `gx` and the last
/// row of `gy` are zero.
pub fn image_gradient(img: &Image) -> (Image, Image) {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut gx = vec![0.0; h * w * c];
    let mut gy = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let i = (y * w + x) * c + k;
                if x + 1 < w {
                    gx[i] = img.get(x + 1, y, k) - img.get(x, y, k);
                }
                if y + 1 < h {
                    gy[i] = img.get(x, y + 1, k) - img.get(x, y, k);
                }
            }
        }
    }
    (Image::from_parts(h, w, c, gx), Image::from_parts(h, w, c, gy))
}

/// Soft census transform of the image luminance. Each descriptor entry is
/// `s((L(q) - L(p)) / softness)` for a neighbor `q` of `p`, in raster order
/// over the window with the center skipped. Neighbors outside the image take
/// the border-clamped value.
pub fn soft_census(img: &Image, radius: usize, softness: f64) -> Result<DescriptorImage> {
    if radius == 0 {
        return Err(Error::InvalidParameter("census radius must be >= 1".into()));
    }
    if !(softness > 0.0) {
        return Err(Error::InvalidParameter(format!("census softness {softness} must be > 0")));
    }
    let lum = img.luminance();
    let (h, w) = (img.height, img.width);
    let r = radius as isize;
    let side = 2 * radius + 1;
    let dim = side * side - 1;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = lum.get(x as usize, y as usize, 0);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let qx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let qy = (y + dy).clamp(0, h as isize - 1) as usize;
                    data.push(squash((lum.get(qx, qy, 0) - center) / softness));
                }
            }
        }
    }
    Ok(DescriptorImage { height: h, width: w, dim, data })
}

/// Windowed SSIM between `a` and `b`, per channel, returned as the
/// dissimilarity `(1 - SSIM) / 2` in `[0, 1]`. Windows are truncated at the
/// image border.
pub fn ssim_map(a: &Image, b: &Image, window: usize) -> Result<Image> {
    Ok(SsimPass::forward(a, b, window)?.dissimilarity_image())
}

/// One SSIM evaluation with the partials needed to backpropagate into `b`.
pub(crate) struct SsimPass {
    height: usize,
    width: usize,
    channels: usize,
    radius: usize,
    dissim: Vec<f64>,
    ds_dmu: Vec<f64>,
    ds_dm2: Vec<f64>,
    ds_dab: Vec<f64>,
    count: Vec<f64>,
}

fn window_bounds(i: usize, r: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r).min(n - 1))
}

impl SsimPass {
    pub(crate) fn forward(a: &Image, b: &Image, window: usize) -> Result<SsimPass> {
        ensure_same_shape("ssim", a.shape(), b.shape())?;
        if a.channels != b.channels {
            return Err(Error::ShapeMismatch(format!(
                "ssim channels {} vs {}",
                a.channels, b.channels
            )));
        }
        if window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("ssim window {window} must be odd")));
        }
        let (h, w, c) = (a.height, a.width, a.channels);
        let r = window / 2;
        let n = h * w * c;
        let mut pass = SsimPass {
            height: h,
            width: w,
            channels: c,
            radius: r,
            dissim: vec![0.0; n],
            ds_dmu: vec![0.0; n],
            ds_dm2: vec![0.0; n],
            ds_dab: vec![0.0; n],
            count: vec![0.0; h * w],
        };
        for y in 0..h {
            let (ya, yb) = window_bounds(y, r, h);
            for x in 0..w {
                let (xa, xb) = window_bounds(x, r, w);
                let cnt = ((yb - ya + 1) * (xb - xa + 1)) as f64;
                pass.count[y * w + x] = cnt;
                for k in 0..c {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for qy in ya..=yb {
                        for qx in xa..=xb {
                            let va = a.get(qx, qy, k);
                            let vb = b.get(qx, qy, k);
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                    }
                    let (mu_a, mu_b) = (sa / cnt, sb / cnt);
                    let (m_aa, m_bb, m_ab) = (saa / cnt, sbb / cnt, sab / cnt);
                    let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
                    let a2 = 2.0 * (m_ab - mu_a * mu_b) + SSIM_C2;
                    let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
                    let b2 = (m_aa - mu_a * mu_a) + (m_bb - mu_b * mu_b) + SSIM_C2;
                    let den = b1 * b2;
                    let s = a1 * a2 / den;
                    let i = (y * w + x) * c + k;
                    pass.dissim[i] = (1.0 - s) / 2.0;
                    pass.ds_dmu[i] = (2.0 * mu_a * a2 - 2.0 * mu_a * a1) / den
                        - s * (2.0 * mu_b * b2 - 2.0 * mu_b * b1) / den;
                    pass.ds_dm2[i] = -s / b2;
                    pass.ds_dab[i] = 2.0 * a1 / den;
                }
            }
        }
        Ok(pass)
    }

    pub(crate) fn dissimilarity(&self) -> &[f64] {
        &self.dissim
    }

    fn dissimilarity_image(self) -> Image {
        Image::from_parts(self.height, self.width, self.channels, self.dissim)
    }

    /// Given `upstream[i] = dL/d dissim[i]`, returns `dL/db` per pixel and channel.
    pub(crate) fn backward_b(&self, a: &Image, b: &Image, upstream: &[f64]) -> Vec<f64> {
        let (h, w, c, r) = (self.height, self.width, self.channels, self.radius);
        let n = h * w * c;
        let mut k_mu = vec![0.0; n];
        let mut k_m2 = vec![0.0; n];
        let mut k_ab = vec![0.0; n];
        for p in 0..h * w {
            let cnt = self.count[p];
            for k in 0..c {
                let i = p * c + k;
                // d dissim / dS = -1/2
                let g = -0.5 * upstream[i] / cnt;
                k_mu[i] = g * self.ds_dmu[i];
                k_m2[i] = g * self.ds_dm2[i];
                k_ab[i] = g * self.ds_dab[i];
            }
        }
        // Window membership is symmetric, so scattering to the window equals
        // gathering over it.
        let mut grad = vec![0.0; n];
        for y in 0..h {
            let (ya, yb) = window_bounds(y, r, h);
            for x in 0..w {
                let (xa, xb) = window_bounds(x, r, w);
                for k in 0..c {
                    let (mut s_mu, mut s_m2, mut s_ab) = (0.0, 0.0, 0.0);
                    for py in ya..=yb {
                        for px in xa..=xb {
                            let j = (py * w + px) * c + k;
                            s_mu += k_mu[j];
                            s_m2 += k_m2[j];
                            s_ab += k_ab[j];
                        }
                    }
                    let i = (y * w + x) * c + k;
                    grad[i] = s_mu + 2.0 * b.data[i] * s_m2 + a.data[i] * s_ab;
                }
            }
        }
        grad
    }
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders.
pub(crate) fn blur121(h: usize, w: usize, c: usize, data: &[f64]) -> Vec<f64> {
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            for k in 0..c {
                tmp[(y * w + x) * c + k] = 0.25 * data[(y * w + xl) * c + k]
                    + 0.5 * data[(y * w + x) * c + k]
                    + 0.25 * data[(y * w + xr) * c + k];
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        let yu = y.saturating_sub(1);
        let yd = (y + 1).min(h - 1);
        for x in 0..w {
            for k in 0..c {
                out[(y * w + x) * c + k] = 0.25 * tmp[(yu * w + x) * c + k]
                    + 0.5 * tmp[(y * w + x) * c + k]
                    + 0.25 * tmp[(yd * w + x) * c + k];
            }
        }
    }
    out
}

/// Resamples a raster to `(new_h, new_w)` with pixel-center alignment.
/// When shrinking, a `[1, 2, 1]` prefilter is applied first.
pub(crate) fn resample(
    h: usize,
    w: usize,
    c: usize,
    data: &[f64],
    new_h: usize,
    new_w: usize,
) -> Vec<f64> {
    let shrinking = new_h < h || new_w < w;
    let blurred;
    let src = if shrinking {
        blurred = blur121(h, w, c, data);
        &blurred[..]
    } else {
        data
    };
    let grid = Grid { height: h, width: w, channels: c, data: src };
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let mut out = vec![0.0; new_h * new_w * c];
    for y in 0..new_h {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let i = (y * new_w + x) * c;
            grid.sample(fx, fy, &mut out[i..i + c]);
        }
    }
    out
}

impl Image {
    /// Resized copy, used to build image pyramids.
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        check_dims(height, width)?;
        Ok(Image::from_parts(
            height,
            width,
            self.channels,
            resample(self.height, self.width, self.channels, &self.data, height, width),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Image::new(1, 5, 1, vec![0.0; 5]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0, 0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn sample_constant_image() {
        let img = Image::filled(5, 7, 3, 0.5).unwrap();
        for &(x, y) in &[(0.0, 0.0), (2.3, 1.7), (6.0, 4.0), (-3.0, 10.0)] {
            let (v, _) = img.bilinear_sample(x, y).unwrap();
            assert!(v.iter().all(|&c| c == 0.5));
        }
    }

    #[test]
    fn sample_integer_coordinates_is_exact() {
        let img = random_image(6, 8, 3, 1);
        let (v, inside) = img.bilinear_sample(3.0, 4.0).unwrap();
        assert!(inside);
        assert_eq!(v, img.pixel(3, 4));
    }

    #[test]
    fn sample_two_by_two_center() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, inside) = img.bilinear_sample(0.5, 0.5).unwrap();
        assert!(inside);
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_out_of_bounds_clamps() {
        let img = random_image(4, 4, 1, 2);
        let (v, inside) = img.bilinear_sample(-2.0, 1.0).unwrap();
        assert!(!inside);
        assert_eq!(v[0], img.get(0, 1, 0));
        assert!(img.bilinear_sample(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let c = Image::filled(4, 5, 3, 0.3).unwrap();
        let (gx, gy) = image_gradient(&c);
        assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));

        let w = 6;
        let ramp = Image::from_fn(4, w, 1, |x, _, _| x as f64 / (w - 1) as f64).unwrap();
        let (gx, gy) = image_gradient(&ramp);
        for y in 0..4 {
            for x in 0..w {
                let expect = if x + 1 < w { 1.0 / (w - 1) as f64 } else { 0.0 };
                assert!((gx.get(x, y, 0) - expect).abs() < 1e-12);
                assert_eq!(gy.get(x, y, 0), 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_vertical_step() {
        let k = 3;
        let step = Image::from_fn(6, 4, 1, |_, y, _| if y >= k { 1.0 } else { 0.0 }).unwrap();
        let (_, gy) = image_gradient(&step);
        for y in 0..6 {
            for x in 0..4 {
                let expect = if y == k - 1 { 1.0 } else { 0.0 };
                assert_eq!(gy.get(x, y, 0), expect);
            }
        }
    }

    #[test]
    fn census_of_constant_image_is_zero() {
        let img = Image::filled(5, 5, 3, 0.7).unwrap();
        let d = soft_census(&img, 1, 0.02).unwrap();
        assert_eq!(d.dim(), 8);
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!(soft_census(&img, 2, 0.02).unwrap().dim(), 24);
    }

    #[test]
    fn census_single_bright_pixel() {
        let img = Image::from_fn(5, 5, 1, |x, y, _| if (x, y) == (2, 2) { 1.0 } else { 0.0 }).unwrap();
        let d = soft_census(&img, 1, 0.02).unwrap();
        assert!(d.descriptor(2, 2).iter().all(|&v| v < -0.999));
        for y in 1..=3usize {
            for x in 1..=3usize {
                if (x, y) == (2, 2) {
                    continue;
                }
                let desc = d.descriptor(x, y);
                // the entry pointing at (2, 2) from (x, y)
                let (dx, dy) = (2 - x as isize, 2 - y as isize);
                let idx = ((dy + 1) * 3 + (dx + 1)) as usize;
                let idx = if idx > 4 { idx - 1 } else { idx };
                for (j, &v) in desc.iter().enumerate() {
                    if j == idx {
                        assert!(v > 0.999);
                    } else {
                        assert!(v.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn census_rejects_bad_parameters() {
        let img = Image::filled(3, 3, 1, 0.0).unwrap();
        assert!(soft_census(&img, 0, 0.02).is_err());
        assert!(soft_census(&img, 1, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random_image(8, 9, 3, 3);
        let d = ssim_map(&a, &a, 3).unwrap();
        assert!(d.data().iter().all(|&v| v.abs() < 1e-12));

        let zero = Image::filled(5, 5, 1, 0.0).unwrap();
        let one = Image::filled(5, 5, 1, 1.0).unwrap();
        let d = ssim_map(&zero, &one, 3).unwrap();
        assert!(d.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(ssim_map(&zero, &random_image(5, 6, 1, 0), 3).is_err());
        assert!(ssim_map(&zero, &one, 4).is_err());
    }

    #[test]
    fn ssim_localizes_inverted_block() {
        let a = random_image(20, 20, 1, 4);
        let mut b = a.clone();
        for y in 8..12 {
            for x in 8..12 {
                b.set(x, y, 0, 1.0 - a.get(x, y, 0));
            }
        }
        let d = ssim_map(&a, &b, 3).unwrap();
        let (mut inside, mut n_in) = (0.0, 0);
        for y in 0..20 {
            for x in 0..20 {
                let near = (7..=12).contains(&x) && (7..=12).contains(&y);
                if near {
                    inside += d.get(x, y, 0);
                    n_in += 1;
                } else {
                    assert!(d.get(x, y, 0).abs() < 1e-12, "leak at ({x},{y})");
                }
            }
        }
        assert!(inside / n_in as f64 > 0.1);
    }

    #[test]
    fn ssim_backward_matches_finite_differences() {
        let a = random_image(5, 6, 2, 5);
        let b = random_image(5, 6, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let up: Vec<f64> = (0..a.data().len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let objective = |bb: &Image| -> f64 {
            let p = SsimPass::forward(&a, bb, 3).unwrap();
            p.dissimilarity().iter().zip(&up).map(|(d, u)| d * u).sum()
        };
        let pass = SsimPass::forward(&a, &b, 3).unwrap();
        let grad = pass.backward_b(&a, &b, &up);
        let h = 1e-6;
        for (i, &g) in grad.iter().enumerate() {
            let mut bp = b.clone();
            bp.data[i] += h;
            let mut bm = b.clone();
            bm.data[i] -= h;
            let fd = (objective(&bp) - objective(&bm)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {g}");
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(16, 20, 3, 0.25).unwrap();
        let small = img.resized(8, 10).unwrap();
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sample_is_lipschitz(seed in 0u64..500, x in 0.0f64..6.0, y in 0.0f64..4.0, hstep in 0.0f64..0.5) {
                let img = random_image(5, 7, 1, seed);
                let mut max_adj: f64 = 0.0;
                for yy in 0..5 { for xx in 0..6 {
                    max_adj = max_adj.max((img.get(xx + 1, yy, 0) - img.get(xx, yy, 0)).abs());
                }}
                let (a, _) = img.bilinear_sample(x, y).unwrap();
                let (b, _) = img.bilinear_sample(x + hstep, y).unwrap();
                prop_assert!((a[0] - b[0]).abs() <= hstep * max_adj + 1e-12);
            }

            #[test]
            fn census_illumination_invariance(seed in 0u64..500, offset in -0.3f64..0.3, scale in 0.2f64..3.0) {
                let img = random_image(6, 7, 3, seed);
                let base = soft_census(&img, 1, 0.02).unwrap();
                let shifted = soft_census(&img.map(|v| v + offset), 1, 0.02).unwrap();
                let scaled = soft_census(&img.map(|v| v * scale), 1, 0.02 * scale).unwrap();
                for ((a, b), c) in base.data().iter().zip(shifted.data()).zip(scaled.data()) {
                    prop_assert!((a - b).abs() < 1e-9);
                    prop_assert!((a - c).abs() < 1e-9);
                }
            }

            #[test]
            fn ssim_self_is_zero(seed in 0u64..500) {
                let img = random_image(6, 5, 3, seed);
                let d = ssim_map(&img, &img, 3).unwrap();
                prop_assert!(d.data().iter().all(|&v| v.abs() < 1e-12));
            }
        }
    }
}

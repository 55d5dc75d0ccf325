//! Flow and mask rasters, backward warping, forward-backward consistency and
//! disparity extraction.

use crate::error::{ensure_same_shape, Error, Result};
use crate::image::{check_dims, check_finite, resample, Image};
use crate::sampling::Grid;

/// Default relative tolerance of the forward-backward check.
pub const DEFAULT_ALPHA1: f64 = 0.01;
/// Default absolute tolerance of the forward-backward check, in squared pixels.
pub const DEFAULT_ALPHA2: f64 = 0.5;

/// Dense displacement field, `(u, v)` per pixel, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<FlowField> {
        check_dims(height, width)?;
        if data.len() != height * width * 2 {
            return Err(Error::InvalidDimensions(format!(
                "flow data length {} != {height}*{width}*2",
                data.len()
            )));
        }
        check_finite("flow", &data)?;
        Ok(FlowField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<FlowField> {
        FlowField::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Result<FlowField> {
        FlowField::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<FlowField> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                data.push(u);
                data.push(v);
            }
        }
        FlowField::new(height, width, data)
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>) -> FlowField {
        debug_assert_eq!(data.len(), height * width * 2);
        FlowField { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = (y * self.width + x) * 2;
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    pub(crate) fn grid(&self) -> Grid<'_> {
        Grid { height: self.height, width: self.width, channels: 2, data: &self.data }
    }

    /// Bilinear sample of the field at a real-valued location (border clamped).
    pub fn sample(&self, x: f64, y: f64) -> ((f64, f64), bool) {
        let mut out = [0.0; 2];
        let inside = self.grid().sample(x, y, &mut out);
        ((out[0], out[1]), inside)
    }

    pub fn scaled(&self, k: f64) -> FlowField {
        FlowField::from_parts(self.height, self.width, self.data.iter().map(|v| v * k).collect())
    }

    pub fn negated(&self) -> FlowField {
        self.scaled(-1.0)
    }

    /// Resamples the field to a new resolution, rescaling the vectors by the
    /// per-axis size ratio.
    pub fn resized(&self, height: usize, width: usize) -> Result<FlowField> {
        check_dims(height, width)?;
        let mut data = resample(self.height, self.width, 2, &self.data, height, width);
        let ku = width as f64 / self.width as f64;
        let kv = height as f64 / self.height as f64;
        for px in data.chunks_exact_mut(2) {
            px[0] *= ku;
            px[1] *= kv;
        }
        Ok(FlowField::from_parts(height, width, data))
    }

    /// Pointwise mean of several fields.
    pub fn mean(fields: &[&FlowField]) -> Result<FlowField> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidParameter("mean of zero flow fields".into()))?;
        let mut acc = vec![0.0; first.data.len()];
        for f in fields {
            ensure_same_shape("flow mean", first.shape(), f.shape())?;
            for (a, v) in acc.iter_mut().zip(&f.data) {
                *a += v;
            }
        }
        let n = fields.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(FlowField::from_parts(first.height, first.width, acc))
    }
}

/// Per-pixel scalar in `[0, 1]`. Used for occlusion (1 = occluded),
/// confidence (1 = confident) and label validity (1 = labeled).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<MaskMap> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "mask data length {} != {height}*{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<MaskMap> {
        MaskMap::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<MaskMap> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        MaskMap::new(height, width, data)
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>) -> MaskMap {
        debug_assert_eq!(data.len(), height * width);
        MaskMap { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Number of pixels with value `>= 0.5`.
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn complement(&self) -> MaskMap {
        MaskMap::from_parts(self.height, self.width, self.data.iter().map(|v| 1.0 - v).collect())
    }

    /// Pointwise product.
    pub fn and(&self, other: &MaskMap) -> Result<MaskMap> {
        ensure_same_shape("mask product", self.shape(), other.shape())?;
        Ok(MaskMap::from_parts(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        ))
    }

    /// Thresholds at 0.5, the rule for every resampled mask.
    pub fn binarized(&self) -> MaskMap {
        MaskMap::from_parts(
            self.height,
            self.width,
            self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Area-resampled then re-binarized copy.
    pub fn resized(&self, height: usize, width: usize) -> Result<MaskMap> {
        check_dims(height, width)?;
        let data = resample(self.height, self.width, 1, &self.data, height, width)
            .into_iter()
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok(MaskMap::from_parts(height, width, data))
    }
}

/// Backward warp: `warped(p) = target(p + flow(p))`, with `valid(p) = 1` when
/// the sample location lies inside the target.
pub fn warp_image(target: &Image, flow: &FlowField) -> Result<(Image, MaskMap)> {
    ensure_same_shape("warp_image", target.shape(), flow.shape())?;
    let (h, w, c) = (target.height(), target.width(), target.channels());
    let grid = target.grid();
    let mut out = vec![0.0; h * w * c];
    let mut valid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let i = y * w + x;
            let inside = grid.sample(x as f64 + u, y as f64 + v, &mut out[i * c..(i + 1) * c]);
            valid[i] = if inside { 1.0 } else { 0.0 };
        }
    }
    Ok((Image::from_parts(h, w, c, out), MaskMap::from_parts(h, w, valid)))
}

/// Reversed forward flow: `w_b` sampled (bilinear, border clamped) at `p + w_f(p)`.
pub fn reverse_flow(w_f: &FlowField, w_b: &FlowField) -> Result<FlowField> {
    ensure_same_shape("reverse_flow", w_f.shape(), w_b.shape())?;
    let (h, w) = w_f.shape();
    let grid = w_b.grid();
    let mut out = vec![0.0; h * w * 2];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = w_f.get(x, y);
            let i = (y * w + x) * 2;
            grid.sample(x as f64 + u, y as f64 + v, &mut out[i..i + 2]);
        }
    }
    Ok(FlowField::from_parts(h, w, out))
}

/// Forward-backward consistency check. A pixel is marked occluded (1) when
///
/// `|w_f + w^_f|^2 >= alpha1 * (|w_f|^2 + |w^_f|^2) + alpha2`
///
/// or when its correspondent `p + w_f(p)` lands more than half a pixel beyond
/// the border. The second rule is needed because border clamping would
/// otherwise make a constant field look consistent for pixels that move out
/// of view.
pub fn occlusion_from_consistency(
    w_f: &FlowField,
    w_b: &FlowField,
    alpha1: f64,
    alpha2: f64,
) -> Result<MaskMap> {
    if !(alpha1 >= 0.0) || !(alpha2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "consistency tolerances alpha1={alpha1} (>= 0), alpha2={alpha2} (> 0)"
        )));
    }
    let reversed = reverse_flow(w_f, w_b)?;
    let (h, w) = w_f.shape();
    let mut occ = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = w_f.get(x, y);
            let (ru, rv) = reversed.get(x, y);
            let mismatch = (u + ru).powi(2) + (v + rv).powi(2);
            let bound = alpha1 * (u * u + v * v + ru * ru + rv * rv) + alpha2;
            let leaves = !within_extent(h, w, x as f64 + u, y as f64 + v);
            if leaves || mismatch >= bound {
                occ[y * w + x] = 1.0;
            }
        }
    }
    Ok(MaskMap::from_parts(h, w, occ))
}

/// Whether `(x, y)` falls on some pixel of an `h x w` grid, each pixel
/// covering half a unit around its center.
fn within_extent(h: usize, w: usize, x: f64, y: f64) -> bool {
    x >= -0.5 && y >= -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5
}

/// Confidence is the complement of occlusion.
pub fn confidence_map(occ: &MaskMap) -> MaskMap {
    occ.complement()
}

/// How a disparity raster was derived from a flow field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisparityConvention {
    /// `d = max(-u, 0)`: left image as reference, matches move left.
    NegatedHorizontalClamped,
}

/// Scalar disparity per pixel, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Disparity {
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub convention: DisparityConvention,
}

impl Disparity {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Disparity> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::InvalidDimensions("disparity data length".into()));
        }
        check_finite("disparity", &data)?;
        Ok(Disparity { height, width, data, convention: DisparityConvention::NegatedHorizontalClamped })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Keeps only the horizontal flow component as a disparity, `max(-u, 0)`.
pub fn flow_to_disparity(flow: &FlowField) -> Disparity {
    let data = flow.data.chunks_exact(2).map(|px| (-px[0]).max(0.0)).collect();
    Disparity {
        height: flow.height,
        width: flow.width,
        data,
        convention: DisparityConvention::NegatedHorizontalClamped,
    }
}

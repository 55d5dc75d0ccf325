//! Flow, occlusion and disparity metrics.
//!
//! Every mask argument is read as binary with threshold 0.5. Sums run in
//! raster order so results are reproducible bit for bit.

use std::fmt;

use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::{Disparity, FlowField, MaskMap};

/// Outlier thresholds shared by Fl and D1: an error counts when it exceeds
/// both the absolute and the relative bound.
pub const OUTLIER_ABS: f64 = 3.0;
pub const OUTLIER_REL: f64 = 0.05;

fn selected(mask: &MaskMap, what: &str) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.data()[i] >= 0.5).collect();
    if idx.is_empty() {
        return Err(Error::DegenerateMask(format!("{what} mask is empty")));
    }
    Ok(idx)
}

fn endpoint_error(flow: &FlowField, gt: &FlowField, p: usize) -> f64 {
    let (a, b) = (flow.data(), gt.data());
    let (du, dv) = (a[2 * p] - b[2 * p], a[2 * p + 1] - b[2 * p + 1]);
    (du * du + dv * dv).sqrt()
}

#[inline]
pub fn is_outlier(error: f64, gt_magnitude: f64) -> bool {
    error > OUTLIER_ABS && error > OUTLIER_REL * gt_magnitude
}

/// Mean endpoint error over the masked pixels.
pub fn epe(flow: &FlowField, gt: &FlowField, mask: &MaskMap) -> Result<f64> {
    ensure_same_shape("epe flows", flow.shape(), gt.shape())?;
    ensure_same_shape("epe mask", flow.shape(), mask.shape())?;
    let idx = selected(mask, "epe")?;
    let sum: f64 = idx.iter().map(|&p| endpoint_error(flow, gt, p)).sum();
    Ok(sum / idx.len() as f64)
}

/// Fraction of masked pixels whose endpoint error is an outlier.
pub fn fl_rate(flow: &FlowField, gt: &FlowField, mask: &MaskMap) -> Result<f64> {
    ensure_same_shape("fl flows", flow.shape(), gt.shape())?;
    ensure_same_shape("fl mask", flow.shape(), mask.shape())?;
    let idx = selected(mask, "fl")?;
    let g = gt.data();
    let bad = idx
        .iter()
        .filter(|&&p| is_outlier(endpoint_error(flow, gt, p), (g[2 * p] * g[2 * p] + g[2 * p + 1] * g[2 * p + 1]).sqrt()))
        .count();
    Ok(bad as f64 / idx.len() as f64)
}

/// Precision, recall and F-measure with occluded pixels as the positive class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

pub fn occlusion_score(pred: &MaskMap, gt: &MaskMap, eval_mask: &MaskMap) -> Result<OcclusionScore> {
    ensure_same_shape("occlusion masks", pred.shape(), gt.shape())?;
    ensure_same_shape("occlusion eval mask", pred.shape(), eval_mask.shape())?;
    let idx = selected(eval_mask, "occlusion evaluation")?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &p in &idx {
        match (pred.data()[p] >= 0.5, gt.data()[p] >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f_measure = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(OcclusionScore { precision, recall, f_measure })
}

pub fn occlusion_f_measure(pred: &MaskMap, gt: &MaskMap, eval_mask: &MaskMap) -> Result<f64> {
    Ok(occlusion_score(pred, gt, eval_mask)?.f_measure)
}

/// Fraction of masked pixels whose disparity error is an outlier.
pub fn d1_rate(disp: &Disparity, gt: &Disparity, mask: &MaskMap) -> Result<f64> {
    ensure_same_shape("d1 disparities", disp.shape(), gt.shape())?;
    ensure_same_shape("d1 mask", disp.shape(), mask.shape())?;
    let idx = selected(mask, "d1")?;
    let (d, g) = (disp.data(), gt.data());
    let bad = idx.iter().filter(|&&p| is_outlier((d[p] - g[p]).abs(), g[p].abs())).count();
    Ok(bad as f64 / idx.len() as f64)
}

/// Evaluation regions: everything with ground truth, and its split into
/// non-occluded and occluded parts.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSplit {
    pub all: MaskMap,
    pub noc: MaskMap,
    pub occ: MaskMap,
}

impl RegionSplit {
    /// `valid` marks pixels with ground truth (all pixels when `None`).
    pub fn new(gt_occlusion: &MaskMap, valid: Option<&MaskMap>) -> Result<RegionSplit> {
        let (h, w) = gt_occlusion.shape();
        let all = match valid {
            Some(v) => {
                ensure_same_shape("region valid mask", v.shape(), (h, w))?;
                v.binarized()
            }
            None => MaskMap::filled(h, w, 1.0)?,
        };
        let occ = all.and(&gt_occlusion.binarized())?;
        let noc = all.and(&gt_occlusion.binarized().complement())?;
        Ok(RegionSplit { all, noc, occ })
    }

    pub fn regions(&self) -> [(Region, &MaskMap); 3] {
        [(Region::All, &self.all), (Region::Noc, &self.noc), (Region::Occ, &self.occ)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    All,
    Noc,
    Occ,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::All => "all",
            Region::Noc => "noc",
            Region::Occ => "occ",
        })
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub region: Region,
    pub value: f64,
    pub pixel_count: usize,
}

/// EPE and Fl per region, plus the occlusion F-measure when a predicted
/// occlusion map is given. Empty regions are skipped.
pub fn flow_report(
    flow: &FlowField,
    gt: &FlowField,
    split: &RegionSplit,
    pred_occlusion: Option<&MaskMap>,
    gt_occlusion: &MaskMap,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (region, mask) in split.regions() {
        let n = mask.count_set();
        if n == 0 {
            continue;
        }
        rows.push(MetricRow { metric: "epe", region, value: epe(flow, gt, mask)?, pixel_count: n });
        rows.push(MetricRow { metric: "fl", region, value: fl_rate(flow, gt, mask)?, pixel_count: n });
    }
    if let Some(pred) = pred_occlusion {
        let n = split.all.count_set();
        let value = occlusion_f_measure(pred, gt_occlusion, &split.all)?;
        rows.push(MetricRow { metric: "occ_f", region: Region::All, value, pixel_count: n });
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,region,value,pixel_count\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.metric, r.region, r.value, r.pixel_count));
    }
    s
}

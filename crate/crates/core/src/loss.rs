//! Loss terms with analytic gradients with respect to the forward and
//! backward flow fields, so that a flow field can be optimized directly.
//!
//! Conventions:
//! - the robust penalty `psi(x) = (|x| + eps)^q` is applied per component;
//! - photometric terms average `psi` over feature components, flow terms sum
//!   it over `(u, v)`;
//! - masks are constants: no gradient flows through occlusion, confidence or
//!   validity maps.

use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::{FlowField, MaskMap, DEFAULT_ALPHA1, DEFAULT_ALPHA2};
use crate::image::{image_gradient, soft_census, DescriptorImage, Image, SsimPass};
use crate::sampling::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhotometricKind {
    Brightness,
    Ssim,
    Census,
}

impl std::str::FromStr for PhotometricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(PhotometricKind::Brightness),
            "ssim" => Ok(PhotometricKind::Ssim),
            "census" => Ok(PhotometricKind::Census),
            other => Err(Error::InvalidParameter(format!("unknown photometric kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for PhotometricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhotometricKind::Brightness => "brightness",
            PhotometricKind::Ssim => "ssim",
            PhotometricKind::Census => "census",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Offset inside the robust penalty.
    pub epsilon: f64,
    /// Exponent of the robust penalty, in `(0, 1]`.
    pub q_exponent: f64,
    /// Edge sensitivity of the smoothness weights.
    pub beta: f64,
    pub smooth_weight: f64,
    pub photometric_kind: PhotometricKind,
    pub alpha1: f64,
    pub alpha2: f64,
    pub census_radius: usize,
    pub census_softness: f64,
    pub ssim_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.01,
            q_exponent: 0.4,
            beta: 10.0,
            smooth_weight: 0.1,
            photometric_kind: PhotometricKind::Census,
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            census_radius: 1,
            census_softness: 0.02,
            ssim_window: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be > 0", self.epsilon));
        }
        if !(self.q_exponent > 0.0 && self.q_exponent <= 1.0) {
            return bad(format!("q_exponent {} must be in (0, 1]", self.q_exponent));
        }
        if !(self.beta >= 0.0) || !(self.smooth_weight >= 0.0) {
            return bad("beta and smooth_weight must be >= 0".into());
        }
        if !(self.alpha1 >= 0.0) || !(self.alpha2 > 0.0) {
            return bad("alpha1 must be >= 0 and alpha2 > 0".into());
        }
        if self.census_radius == 0 || !(self.census_softness > 0.0) {
            return bad("census radius must be >= 1 and softness > 0".into());
        }
        if self.ssim_window.is_multiple_of(2) {
            return bad(format!("ssim window {} must be odd", self.ssim_window));
        }
        Ok(())
    }

    pub(crate) fn robust(&self) -> Robust {
        Robust { eps: self.epsilon, q: self.q_exponent }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Robust {
    eps: f64,
    q: f64,
}

impl Robust {
    #[inline]
    pub fn value_grad(self, x: f64) -> (f64, f64) {
        let a = x.abs() + self.eps;
        let v = a.powf(self.q);
        if x == 0.0 {
            return (v, 0.0);
        }
        (v, self.q * x.signum() * v / a)
    }
}

/// `psi(x) = (|x| + eps)^q` and its derivative; the derivative at exactly
/// zero is taken as 0.
pub fn robust_penalty(x: f64, cfg: &LossConfig) -> (f64, f64) {
    cfg.robust().value_grad(x)
}

/// A scalar loss with its gradients with respect to both flow fields.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_wf: FlowField,
    pub grad_wb: FlowField,
}

impl LossReport {
    pub(crate) fn zero(height: usize, width: usize) -> LossReport {
        LossReport {
            value: 0.0,
            grad_wf: FlowField::from_parts(height, width, vec![0.0; height * width * 2]),
            grad_wb: FlowField::from_parts(height, width, vec![0.0; height * width * 2]),
        }
    }

    fn from_directions(h: usize, w: usize, fwd: (f64, Vec<f64>), bwd: (f64, Vec<f64>)) -> LossReport {
        LossReport {
            value: fwd.0 + bwd.0,
            grad_wf: FlowField::from_parts(h, w, fwd.1),
            grad_wb: FlowField::from_parts(h, w, bwd.1),
        }
    }

    /// `self += weight * other`.
    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        self.value += weight * other.value;
        for (a, b) in self.grad_wf.data_mut().iter_mut().zip(other.grad_wf.data()) {
            *a += weight * b;
        }
        for (a, b) in self.grad_wb.data_mut().iter_mut().zip(other.grad_wb.data()) {
            *a += weight * b;
        }
    }
}

enum Features {
    Raw { i1: Image, i2: Image },
    Census { d1: DescriptorImage, d2: DescriptorImage },
    Ssim { i1: Image, i2: Image, window: usize },
}

/// Photometric term with the per-image features precomputed, so repeated
/// evaluations during optimization only pay for the warps.
pub struct PhotometricTerm {
    features: Features,
    robust: Robust,
    height: usize,
    width: usize,
}

impl PhotometricTerm {
    pub fn new(i1: &Image, i2: &Image, cfg: &LossConfig) -> Result<PhotometricTerm> {
        cfg.validate()?;
        ensure_same_shape("photometric images", i1.shape(), i2.shape())?;
        if i1.channels() != i2.channels() {
            return Err(Error::ShapeMismatch("photometric image channels differ".into()));
        }
        let features = match cfg.photometric_kind {
            PhotometricKind::Brightness => Features::Raw { i1: i1.clone(), i2: i2.clone() },
            PhotometricKind::Census => Features::Census {
                d1: soft_census(i1, cfg.census_radius, cfg.census_softness)?,
                d2: soft_census(i2, cfg.census_radius, cfg.census_softness)?,
            },
            PhotometricKind::Ssim => {
                Features::Ssim { i1: i1.clone(), i2: i2.clone(), window: cfg.ssim_window }
            }
        };
        Ok(PhotometricTerm { features, robust: cfg.robust(), height: i1.height(), width: i1.width() })
    }

    pub fn evaluate(
        &self,
        w_f: &FlowField,
        w_b: &FlowField,
        occ_f: &MaskMap,
        occ_b: &MaskMap,
    ) -> Result<LossReport> {
        let shape = (self.height, self.width);
        for (what, s) in [
            ("w_f", w_f.shape()),
            ("w_b", w_b.shape()),
            ("O_f", occ_f.shape()),
            ("O_b", occ_b.shape()),
        ] {
            ensure_same_shape(what, shape, s)?;
        }
        let (fwd, bwd) = match &self.features {
            Features::Raw { i1, i2 } => (
                self.feature_direction(i1.grid(), i2.grid(), w_f, occ_f, "forward")?,
                self.feature_direction(i2.grid(), i1.grid(), w_b, occ_b, "backward")?,
            ),
            Features::Census { d1, d2 } => (
                self.feature_direction(d1.grid(), d2.grid(), w_f, occ_f, "forward")?,
                self.feature_direction(d2.grid(), d1.grid(), w_b, occ_b, "backward")?,
            ),
            Features::Ssim { i1, i2, window } => (
                self.ssim_direction(i1, i2, w_f, occ_f, *window, "forward")?,
                self.ssim_direction(i2, i1, w_b, occ_b, *window, "backward")?,
            ),
        };
        Ok(LossReport::from_directions(self.height, self.width, fwd, bwd))
    }

    fn visible_mass(occ: &MaskMap, direction: &str) -> Result<f64> {
        let mass: f64 = occ.data().iter().map(|o| 1.0 - o).sum();
        if mass <= 0.0 {
            return Err(Error::DegenerateMask(format!(
                "every pixel is occluded in the {direction} photometric term"
            )));
        }
        Ok(mass)
    }

    /// `sum_p (1 - O(p)) * mean_c psi(F_ref(p) - F_tgt(p + w(p))) / sum (1 - O)`
    fn feature_direction(
        &self,
        reference: Grid<'_>,
        target: Grid<'_>,
        flow: &FlowField,
        occ: &MaskMap,
        direction: &str,
    ) -> Result<(f64, Vec<f64>)> {
        let mass = Self::visible_mass(occ, direction)?;
        let (h, w, c) = (self.height, self.width, reference.channels);
        let norm = 1.0 / (mass * c as f64);
        let mut val = vec![0.0; c];
        let mut dx = vec![0.0; c];
        let mut dy = vec![0.0; c];
        let mut grad = vec![0.0; h * w * 2];
        let mut total = 0.0;
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                let p = y * w + x;
                let weight = 1.0 - occ.data()[p];
                if weight == 0.0 {
                    continue;
                }
                let (u, v) = flow.get(x, y);
                target.sample_with_grad(x as f64 + u, y as f64 + v, &mut val, &mut dx, &mut dy);
                let (mut acc, mut gu, mut gv) = (0.0, 0.0, 0.0);
                let base = p * c;
                for k in 0..c {
                    let r = reference.data[base + k] - val[k];
                    let (pv, pd) = self.robust.value_grad(r);
                    acc += pv;
                    // d r / d(u, v) = -(dx, dy)
                    gu -= pd * dx[k];
                    gv -= pd * dy[k];
                }
                row += weight * acc;
                grad[p * 2] = weight * norm * gu;
                grad[p * 2 + 1] = weight * norm * gv;
            }
            total += row;
        }
        Ok((total * norm, grad))
    }

    fn ssim_direction(
        &self,
        reference: &Image,
        target: &Image,
        flow: &FlowField,
        occ: &MaskMap,
        window: usize,
        direction: &str,
    ) -> Result<(f64, Vec<f64>)> {
        let mass = Self::visible_mass(occ, direction)?;
        let (h, w, c) = (self.height, self.width, reference.channels());
        let norm = 1.0 / (mass * c as f64);
        let grid = target.grid();
        let n = h * w * c;
        let mut warped = vec![0.0; n];
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * c;
                let (u, v) = flow.get(x, y);
                grid.sample_with_grad(
                    x as f64 + u,
                    y as f64 + v,
                    &mut warped[i..i + c],
                    &mut dx[i..i + c],
                    &mut dy[i..i + c],
                );
            }
        }
        let warped = Image::from_parts(h, w, c, warped);
        let pass = SsimPass::forward(reference, &warped, window)?;
        let mut upstream = vec![0.0; n];
        let mut total = 0.0;
        for p in 0..h * w {
            let weight = 1.0 - occ.data()[p];
            if weight == 0.0 {
                continue;
            }
            for k in 0..c {
                let (pv, pd) = self.robust.value_grad(pass.dissimilarity()[p * c + k]);
                total += weight * pv;
                upstream[p * c + k] = weight * norm * pd;
            }
        }
        let d_warped = pass.backward_b(reference, &warped, &upstream);
        let mut grad = vec![0.0; h * w * 2];
        for p in 0..h * w {
            let (mut gu, mut gv) = (0.0, 0.0);
            for k in 0..c {
                gu += d_warped[p * c + k] * dx[p * c + k];
                gv += d_warped[p * c + k] * dy[p * c + k];
            }
            grad[p * 2] = gu;
            grad[p * 2 + 1] = gv;
        }
        Ok((total * norm, grad))
    }
}

/// Occlusion-masked photometric loss in both directions.
pub fn photometric_loss(
    i1: &Image,
    i2: &Image,
    w_f: &FlowField,
    w_b: &FlowField,
    occ_f: &MaskMap,
    occ_b: &MaskMap,
    cfg: &LossConfig,
) -> Result<LossReport> {
    PhotometricTerm::new(i1, i2, cfg)?.evaluate(w_f, w_b, occ_f, occ_b)
}

/// Edge-aware first-order smoothness with the image weights precomputed.
pub struct SmoothnessTerm {
    height: usize,
    width: usize,
    /// Interleaved `(x, y)` weights for I1 and I2.
    weights_1: Vec<f64>,
    weights_2: Vec<f64>,
}

fn edge_weights(img: &Image, beta: f64) -> Vec<f64> {
    let (gx, gy) = image_gradient(img);
    let c = img.channels() as f64;
    gx.data()
        .chunks_exact(img.channels())
        .zip(gy.data().chunks_exact(img.channels()))
        .flat_map(|(a, b)| {
            let mx = a.iter().map(|v| v.abs()).sum::<f64>() / c;
            let my = b.iter().map(|v| v.abs()).sum::<f64>() / c;
            [(-beta * mx).exp(), (-beta * my).exp()]
        })
        .collect()
}

impl SmoothnessTerm {
    pub fn new(i1: &Image, i2: &Image, beta: f64) -> Result<SmoothnessTerm> {
        ensure_same_shape("smoothness images", i1.shape(), i2.shape())?;
        Ok(SmoothnessTerm {
            height: i1.height(),
            width: i1.width(),
            weights_1: edge_weights(i1, beta),
            weights_2: edge_weights(i2, beta),
        })
    }

    pub fn evaluate(&self, w_f: &FlowField, w_b: &FlowField) -> Result<LossReport> {
        ensure_same_shape("smoothness w_f", (self.height, self.width), w_f.shape())?;
        ensure_same_shape("smoothness w_b", (self.height, self.width), w_b.shape())?;
        let fwd = self.direction(&self.weights_1, w_f, None);
        let bwd = self.direction(&self.weights_2, w_b, None);
        Ok(LossReport::from_directions(self.height, self.width, fwd, bwd))
    }

    /// Forward-direction smoothness counting only differences anchored at
    /// pixels where `mask` is set.
    pub fn evaluate_forward_masked(&self, w_f: &FlowField, mask: &MaskMap) -> Result<LossReport> {
        ensure_same_shape("smoothness w_f", (self.height, self.width), w_f.shape())?;
        ensure_same_shape("smoothness mask", (self.height, self.width), mask.shape())?;
        let (value, grad) = self.direction(&self.weights_1, w_f, Some(mask));
        let mut report = LossReport::zero(self.height, self.width);
        report.value = value;
        report.grad_wf = FlowField::from_parts(self.height, self.width, grad);
        Ok(report)
    }

    /// `(1/HW) sum_p sum_{u,v} wx(p) |dx w(p)| + wy(p) |dy w(p)|`
    fn direction(&self, weights: &[f64], flow: &FlowField, mask: Option<&MaskMap>) -> (f64, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let norm = 1.0 / (h * w) as f64;
        let data = flow.data();
        let mut grad = vec![0.0; h * w * 2];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let m = mask.map_or(1.0, |m| m.data()[p]);
                if m == 0.0 {
                    continue;
                }
                let (wx, wy) = (m * weights[p * 2], m * weights[p * 2 + 1]);
                for k in 0..2 {
                    if x + 1 < w {
                        let d = data[(p + 1) * 2 + k] - data[p * 2 + k];
                        total += wx * d.abs();
                        let s = wx * norm * sign(d);
                        grad[(p + 1) * 2 + k] += s;
                        grad[p * 2 + k] -= s;
                    }
                    if y + 1 < h {
                        let d = data[(p + w) * 2 + k] - data[p * 2 + k];
                        total += wy * d.abs();
                        let s = wy * norm * sign(d);
                        grad[(p + w) * 2 + k] += s;
                        grad[p * 2 + k] -= s;
                    }
                }
            }
        }
        (total * norm, grad)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Edge-aware smoothness of both flow fields.
pub fn smoothness_loss(
    i1: &Image,
    i2: &Image,
    w_f: &FlowField,
    w_b: &FlowField,
    cfg: &LossConfig,
) -> Result<LossReport> {
    SmoothnessTerm::new(i1, i2, cfg.beta)?.evaluate(w_f, w_b)
}

/// `sum psi(target - student) * mask / sum mask`, summed over `(u, v)`.
/// Returns `None` when the mask is empty. Gradient is with respect to `student`.
fn masked_flow_term(
    target: &FlowField,
    student: &FlowField,
    mask: &MaskMap,
    robust: Robust,
) -> Result<Option<(f64, Vec<f64>)>> {
    ensure_same_shape("flow term target", target.shape(), student.shape())?;
    ensure_same_shape("flow term mask", target.shape(), mask.shape())?;
    let mass = mask.sum();
    if mass <= 0.0 {
        return Ok(None);
    }
    let mut grad = vec![0.0; student.data().len()];
    let mut total = 0.0;
    for (p, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for k in 0..2 {
            let i = p * 2 + k;
            let (v, d) = robust.value_grad(target.data()[i] - student.data()[i]);
            total += m * v;
            grad[i] = -m * d / mass;
        }
    }
    Ok(Some((total / mass, grad)))
}

fn zeros_like(f: &FlowField) -> Vec<f64> {
    vec![0.0; f.data().len()]
}

/// Distillation on hallucinated occlusions. A direction whose mask is empty
/// contributes zero.
#[allow(clippy::too_many_arguments)]
pub fn occlusion_distill_loss(
    teacher_f: &FlowField,
    teacher_b: &FlowField,
    student_f: &FlowField,
    student_b: &FlowField,
    hallucinated_f: &MaskMap,
    hallucinated_b: &MaskMap,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let r = cfg.robust();
    let fwd = masked_flow_term(teacher_f, student_f, hallucinated_f, r)?
        .unwrap_or_else(|| (0.0, zeros_like(student_f)));
    let bwd = masked_flow_term(teacher_b, student_b, hallucinated_b, r)?
        .unwrap_or_else(|| (0.0, zeros_like(student_b)));
    Ok(LossReport::from_directions(student_f.height(), student_f.width(), fwd, bwd))
}

/// Distillation on teacher-confident pixels. An empty confidence map is an error.
#[allow(clippy::too_many_arguments)]
pub fn confidence_distill_loss(
    teacher_f: &FlowField,
    teacher_b: &FlowField,
    student_f: &FlowField,
    student_b: &FlowField,
    confidence_f: &MaskMap,
    confidence_b: &MaskMap,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let r = cfg.robust();
    let empty = |d: &str| Error::DegenerateMask(format!("{d} confidence map has zero mass"));
    let fwd = masked_flow_term(teacher_f, student_f, confidence_f, r)?.ok_or_else(|| empty("forward"))?;
    let bwd = masked_flow_term(teacher_b, student_b, confidence_b, r)?.ok_or_else(|| empty("backward"))?;
    Ok(LossReport::from_directions(student_f.height(), student_f.width(), fwd, bwd))
}

/// Supervised loss on labeled pixels of the forward flow; `grad_wb` is zero.
pub fn supervised_loss(
    w_f: &FlowField,
    ground_truth: &FlowField,
    valid: &MaskMap,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let (value, grad) = masked_flow_term(ground_truth, w_f, valid, cfg.robust())?
        .ok_or_else(|| Error::DegenerateMask("validity mask is empty".into()))?;
    let (h, w) = w_f.shape();
    let mut report = LossReport::zero(h, w);
    report.value = value;
    report.grad_wf = FlowField::from_parts(h, w, grad);
    Ok(report)
}

/// Which training objective to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Photometric + smoothness.
    Stage1,
    /// Photometric + hallucinated-occlusion distillation + smoothness.
    Stage2V1,
    /// Confidence distillation + smoothness.
    Stage2V2,
    /// Supervised loss + smoothness at unlabeled pixels.
    Supervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2V1 => "stage2_v1",
            Stage::Stage2V2 => "stage2_v2",
            Stage::Supervised => "supervised",
        }
    }

    fn uses_photometric(self) -> bool {
        matches!(self, Stage::Stage1 | Stage::Stage2V1)
    }

    /// Whether the objective reads occlusion maps of the flows being optimized.
    pub fn needs_occlusion(self) -> bool {
        self.uses_photometric()
    }
}

/// Everything a stage objective may read. Fields a stage does not use are ignored.
#[derive(Clone, Copy, Default)]
pub struct StageInputs<'a> {
    pub i1: Option<&'a Image>,
    pub i2: Option<&'a Image>,
    pub w_f: Option<&'a FlowField>,
    pub w_b: Option<&'a FlowField>,
    pub occ_f: Option<&'a MaskMap>,
    pub occ_b: Option<&'a MaskMap>,
    pub teacher_f: Option<&'a FlowField>,
    pub teacher_b: Option<&'a FlowField>,
    pub hallucinated_f: Option<&'a MaskMap>,
    pub hallucinated_b: Option<&'a MaskMap>,
    pub confidence_f: Option<&'a MaskMap>,
    pub confidence_b: Option<&'a MaskMap>,
    pub ground_truth: Option<&'a FlowField>,
    pub valid: Option<&'a MaskMap>,
}

fn need<'a, T>(v: Option<&'a T>, stage: Stage, field: &'static str) -> Result<&'a T> {
    v.ok_or(Error::MissingInput { stage: stage.name(), field })
}

/// A stage objective with its image-dependent parts precomputed.
pub struct StageObjective {
    stage: Stage,
    cfg: LossConfig,
    photometric: Option<PhotometricTerm>,
    smoothness: Option<SmoothnessTerm>,
}

impl StageObjective {
    pub fn new(stage: Stage, i1: Option<&Image>, i2: Option<&Image>, cfg: &LossConfig) -> Result<StageObjective> {
        cfg.validate()?;
        let photometric = if stage.uses_photometric() {
            Some(PhotometricTerm::new(need(i1, stage, "i1")?, need(i2, stage, "i2")?, cfg)?)
        } else {
            None
        };
        let smoothness = if cfg.smooth_weight > 0.0 {
            let a = need(i1, stage, "i1")?;
            // the supervised stage smooths only the forward flow
            let b = if stage == Stage::Supervised { i2.unwrap_or(a) } else { need(i2, stage, "i2")? };
            Some(SmoothnessTerm::new(a, b, cfg.beta)?)
        } else {
            None
        };
        Ok(StageObjective { stage, cfg: cfg.clone(), photometric, smoothness })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn evaluate(&self, inputs: &StageInputs<'_>) -> Result<LossReport> {
        let stage = self.stage;
        let cfg = &self.cfg;
        let w_f = need(inputs.w_f, stage, "w_f")?;
        let mut total = match stage {
            Stage::Stage1 | Stage::Stage2V1 => {
                let w_b = need(inputs.w_b, stage, "w_b")?;
                let pho = self.photometric.as_ref().expect("photometric term built for stage").evaluate(
                    w_f,
                    w_b,
                    need(inputs.occ_f, stage, "occ_f")?,
                    need(inputs.occ_b, stage, "occ_b")?,
                )?;
                let mut total = pho;
                if stage == Stage::Stage2V1 {
                    let occ = occlusion_distill_loss(
                        need(inputs.teacher_f, stage, "teacher_f")?,
                        need(inputs.teacher_b, stage, "teacher_b")?,
                        w_f,
                        w_b,
                        need(inputs.hallucinated_f, stage, "hallucinated_f")?,
                        need(inputs.hallucinated_b, stage, "hallucinated_b")?,
                        cfg,
                    )?;
                    total.accumulate(&occ, 1.0);
                }
                total
            }
            Stage::Stage2V2 => confidence_distill_loss(
                need(inputs.teacher_f, stage, "teacher_f")?,
                need(inputs.teacher_b, stage, "teacher_b")?,
                w_f,
                need(inputs.w_b, stage, "w_b")?,
                need(inputs.confidence_f, stage, "confidence_f")?,
                need(inputs.confidence_b, stage, "confidence_b")?,
                cfg,
            )?,
            Stage::Supervised => supervised_loss(
                w_f,
                need(inputs.ground_truth, stage, "ground_truth")?,
                need(inputs.valid, stage, "valid")?,
                cfg,
            )?,
        };
        if let Some(smo) = &self.smoothness {
            let report = if stage == Stage::Supervised {
                let unlabeled = need(inputs.valid, stage, "valid")?.complement();
                smo.evaluate_forward_masked(w_f, &unlabeled)?
            } else {
                smo.evaluate(w_f, need(inputs.w_b, stage, "w_b")?)?
            };
            total.accumulate(&report, cfg.smooth_weight);
        }
        if !total.value.is_finite() {
            return Err(Error::NonFinite(format!("{} loss value", stage.name())));
        }
        Ok(total)
    }
}

/// Weighted combination of the component losses of a stage:
/// stage 1 is `L_pho + w L_smo`, variant 1 adds `L_occ`, variant 2 is
/// `L_dis + w L_smo`, and the supervised stage is `L_sup` plus smoothness at
/// unlabeled pixels. `w` is `cfg.smooth_weight` (0.1 by default).
pub fn compose_stage_loss(stage: Stage, inputs: &StageInputs<'_>, cfg: &LossConfig) -> Result<LossReport> {
    StageObjective::new(stage, inputs.i1, inputs.i2, cfg)?.evaluate(inputs)
}

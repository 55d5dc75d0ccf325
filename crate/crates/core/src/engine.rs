//! The two-stage pipeline on directly optimized flow fields: coarse-to-fine
//! Adam optimization, teacher training and ensembling, student training on
//! transformed pairs, supervised fine-tuning and the semi-supervised mix.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_same_shape, Error, Result};
use crate::eval;
use crate::flow::{confidence_map, occlusion_from_consistency, FlowField, MaskMap};
use crate::image::Image;
use crate::io;
use crate::loss::{LossConfig, Stage, StageInputs, StageObjective};
use crate::transform::{apply_bundle, hallucinated_occlusion, transform_flow, transform_mask, TransformBundle, TransformedPair};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub iterations_per_level: usize,
    pub occlusion_refresh_interval: usize,
    /// Iterations at the start of the coarsest level during which the
    /// photometric loss covers every pixel.
    pub pretrain_iterations: usize,
    /// `(fraction of the level, factor)`: the step size is multiplied by
    /// `factor` once that fraction of a level's iterations has run.
    pub schedule: Vec<(f64, f64)>,
    /// Half-width of the uniform noise added to a zero initialization.
    pub init_noise: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::with_iterations(500)
    }
}

impl OptimizerConfig {
    /// Defaults for a given number of iterations per level; pretraining takes
    /// the first tenth.
    pub fn with_iterations(iterations: usize) -> OptimizerConfig {
        OptimizerConfig {
            step_size: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            iterations_per_level: iterations,
            occlusion_refresh_interval: 20,
            pretrain_iterations: iterations / 10,
            schedule: vec![(0.6, 0.5), (0.85, 0.5)],
            init_noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam must be > 0");
        }
        if self.iterations_per_level == 0 || self.occlusion_refresh_interval == 0 {
            return bad("iteration counts must be >= 1");
        }
        if self.schedule.iter().any(|&(at, k)| !(0.0..=1.0).contains(&at) || !(k > 0.0)) {
            return bad("schedule entries need a fraction in [0, 1] and a positive factor");
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be >= 0");
        }
        Ok(())
    }

    fn step_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations_per_level as f64;
        self.schedule.iter().filter(|&&(at, _)| frac >= at).fold(self.step_size, |s, &(_, k)| s * k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSpec {
    pub levels: usize,
    pub scale_factor: f64,
    pub min_size: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { levels: 3, scale_factor: 0.5, min_size: 8 }
    }
}

impl PyramidSpec {
    pub fn single() -> PyramidSpec {
        PyramidSpec { levels: 1, ..PyramidSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || !(self.scale_factor > 0.0 && self.scale_factor < 1.0) || self.min_size < 2 {
            return Err(Error::InvalidParameter(format!("invalid pyramid {self:?}")));
        }
        Ok(())
    }

    /// Level shapes from coarsest to finest. Levels that would fall below
    /// `min_size` are dropped, so small inputs get shallower pyramids.
    pub fn shapes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let mut shapes = vec![(height, width)];
        while shapes.len() < self.levels {
            let (h, w) = *shapes.last().expect("nonempty");
            let next = ((h as f64 * self.scale_factor).round() as usize, (w as f64 * self.scale_factor).round() as usize);
            if next.0 < self.min_size || next.1 < self.min_size {
                break;
            }
            shapes.push(next);
        }
        shapes.reverse();
        Ok(shapes)
    }
}

/// Settings shared by every training entry point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub pyramid: PyramidSpec,
    /// Trailing iterates kept as ensemble members.
    pub checkpoints: usize,
    /// Start the student from the transformed teacher flow instead of zero.
    pub student_init_from_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            pyramid: PyramidSpec::default(),
            checkpoints: 5,
            student_init_from_teacher: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.pyramid.validate()
    }
}

/// What, besides the images, steers the optimization. The variant picks the
/// objective.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    /// Photometric and smoothness only.
    Unsupervised,
    /// Photometric loss plus distillation on hallucinated occlusions, which
    /// are recomputed from the student flows at every occlusion refresh.
    Occlusion { teacher_f: &'a FlowField, teacher_b: &'a FlowField, teacher_occ_f: &'a MaskMap, teacher_occ_b: &'a MaskMap },
    /// Distillation on fixed teacher-confident pixels.
    Confidence { teacher_f: &'a FlowField, teacher_b: &'a FlowField, confidence_f: &'a MaskMap, confidence_b: &'a MaskMap },
    /// Labels on the forward flow.
    Labels { ground_truth: &'a FlowField, valid: &'a MaskMap },
}

impl Guidance<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            Guidance::Unsupervised => Stage::Stage1,
            Guidance::Occlusion { .. } => Stage::Stage2V1,
            Guidance::Confidence { .. } => Stage::Stage2V2,
            Guidance::Labels { .. } => Stage::Supervised,
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Guidance::Unsupervised => vec![],
            Guidance::Occlusion { teacher_f, teacher_b, teacher_occ_f, teacher_occ_b } => {
                vec![teacher_f.shape(), teacher_b.shape(), teacher_occ_f.shape(), teacher_occ_b.shape()]
            }
            Guidance::Confidence { teacher_f, teacher_b, confidence_f, confidence_b } => {
                vec![teacher_f.shape(), teacher_b.shape(), confidence_f.shape(), confidence_b.shape()]
            }
            Guidance::Labels { ground_truth, valid } => vec![ground_truth.shape(), valid.shape()],
        }
    }
}

/// Guidance resampled to one pyramid level.
#[derive(Default)]
struct LevelGuidance {
    flow_f: Option<FlowField>,
    flow_b: Option<FlowField>,
    mask_f: Option<MaskMap>,
    mask_b: Option<MaskMap>,
}

impl LevelGuidance {
    fn new(g: &Guidance<'_>, (h, w): (usize, usize)) -> Result<LevelGuidance> {
        let flow = |f: &FlowField| if f.shape() == (h, w) { Ok(f.clone()) } else { f.resized(h, w) };
        let mask = |m: &MaskMap| if m.shape() == (h, w) { Ok(m.clone()) } else { m.resized(h, w) };
        Ok(match *g {
            Guidance::Unsupervised => LevelGuidance::default(),
            Guidance::Occlusion { teacher_f: a, teacher_b: b, teacher_occ_f: c, teacher_occ_b: d }
            | Guidance::Confidence { teacher_f: a, teacher_b: b, confidence_f: c, confidence_b: d } => LevelGuidance {
                flow_f: Some(flow(a)?),
                flow_b: Some(flow(b)?),
                mask_f: Some(mask(c)?),
                mask_b: Some(mask(d)?),
            },
            Guidance::Labels { ground_truth, valid } => {
                LevelGuidance { flow_f: Some(flow(ground_truth)?), mask_f: Some(mask(valid)?), ..Default::default() }
            }
        })
    }
}

/// One optimization problem.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub i1: &'a Image,
    pub i2: &'a Image,
    pub guidance: Guidance<'a>,
    /// Starting flows at full resolution; zero plus noise when absent.
    pub init: Option<(&'a FlowField, &'a FlowField)>,
    /// When known, the trace records the forward EPE at the finest level.
    pub ground_truth: Option<&'a FlowField>,
}

impl<'a> Problem<'a> {
    pub fn new(i1: &'a Image, i2: &'a Image, guidance: Guidance<'a>) -> Problem<'a> {
        Problem { i1, i2, guidance, init: None, ground_truth: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    /// 0 is the coarsest level.
    pub level: usize,
    pub iteration: usize,
    pub loss: f64,
    pub epe: Option<f64>,
}

pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("iteration,level,loss,epe\n");
    for t in trace {
        let epe = t.epe.map(|e| e.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", t.iteration, t.level, t.loss, epe));
    }
    s
}

#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub w_f: FlowField,
    pub w_b: FlowField,
    /// Consistency-check occlusion of the final flows.
    pub occ_f: MaskMap,
    pub occ_b: MaskMap,
    pub trace: Vec<TraceEntry>,
    /// The trailing iterates at the finest level, oldest first.
    pub checkpoints: Vec<(FlowField, FlowField)>,
    /// How many times occlusion was recomputed from the flows being optimized.
    pub occlusion_refreshes: usize,
    /// Hallucinated-occlusion pixel counts at the last refresh (variant 1).
    pub hallucinated: (usize, usize),
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps_adam);
        }
    }
}

fn noisy_zero(h: usize, w: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> FlowField {
    let data = (0..h * w * 2)
        .map(|_| if amplitude > 0.0 { rng.random_range(-amplitude..=amplitude) } else { 0.0 })
        .collect();
    FlowField::from_parts(h, w, data)
}

/// Coarse-to-fine Adam minimization of the objective selected by the
/// problem's guidance, over both flow directions at once.
pub fn optimize_flow(problem: &Problem<'_>, cfg: &TrainConfig, seed: u64) -> Result<FlowSolution> {
    cfg.validate()?;
    let (i1, i2) = (problem.i1, problem.i2);
    ensure_same_shape("optimize_flow images", i1.shape(), i2.shape())?;
    for s in problem.guidance.shapes() {
        ensure_same_shape("optimize_flow guidance", i1.shape(), s)?;
    }
    if let Some((a, b)) = problem.init {
        ensure_same_shape("optimize_flow init", i1.shape(), a.shape())?;
        ensure_same_shape("optimize_flow init", i1.shape(), b.shape())?;
    }
    let stage = problem.guidance.stage();
    let opt = &cfg.optimizer;
    let (a1, a2) = (cfg.loss.alpha1, cfg.loss.alpha2);
    let shapes = cfg.pyramid.shapes(i1.height(), i1.width())?;
    let finest = shapes.len() - 1;

    let mut images = vec![(i1.clone(), i2.clone())];
    for &(h, w) in shapes.iter().rev().skip(1) {
        let (a, b) = images.last().expect("nonempty");
        images.push((a.resized(h, w)?, b.resized(h, w)?));
    }
    images.reverse();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h0, w0) = shapes[0];
    let (mut w_f, mut w_b) = match problem.init {
        Some((a, b)) if shapes.len() == 1 => (a.clone(), b.clone()),
        Some((a, b)) => (a.resized(h0, w0)?, b.resized(h0, w0)?),
        None => (noisy_zero(h0, w0, opt.init_noise, &mut rng), noisy_zero(h0, w0, opt.init_noise, &mut rng)),
    };

    let n_iter = opt.iterations_per_level;
    let refresh = opt.occlusion_refresh_interval;
    let mut trace = Vec::with_capacity(n_iter * shapes.len());
    let mut checkpoints = Vec::new();
    let mut refreshes = 0;
    let mut hallucinated = (0, 0);

    for (level, &(h, w)) in shapes.iter().enumerate() {
        if level > 0 {
            w_f = w_f.resized(h, w)?;
            w_b = w_b.resized(h, w)?;
        }
        let (li1, li2) = &images[level];
        let objective = StageObjective::new(stage, Some(li1), Some(li2), &cfg.loss)?;
        let guide = LevelGuidance::new(&problem.guidance, (h, w))?;
        let gt = match problem.ground_truth {
            Some(g) if level == finest => Some(g),
            _ => None,
        };
        let zero_mask = MaskMap::filled(h, w, 0.0)?;
        let mut occ = (zero_mask.clone(), zero_mask.clone());
        let mut halluc = (zero_mask.clone(), zero_mask);
        let mut adam = Adam::new(h * w * 4);
        let mut params = vec![0.0; h * w * 4];
        let pretrain = if level == 0 && problem.init.is_none() { opt.pretrain_iterations } else { 0 };

        for it in 0..n_iter {
            if stage.needs_occlusion() && it >= pretrain && (it - pretrain).is_multiple_of(refresh) {
                occ = (
                    occlusion_from_consistency(&w_f, &w_b, a1, a2)?,
                    occlusion_from_consistency(&w_b, &w_f, a1, a2)?,
                );
                refreshes += 1;
                if stage == Stage::Stage2V1 {
                    let tof = guide.mask_f.as_ref().expect("teacher occlusion");
                    let tob = guide.mask_b.as_ref().expect("teacher occlusion");
                    halluc = (hallucinated_occlusion(&occ.0, tof)?, hallucinated_occlusion(&occ.1, tob)?);
                    hallucinated = (halluc.0.count_set(), halluc.1.count_set());
                }
            }
            let mut inputs = StageInputs {
                i1: Some(li1),
                i2: Some(li2),
                w_f: Some(&w_f),
                w_b: Some(&w_b),
                ..Default::default()
            };
            match stage {
                Stage::Stage1 => {
                    inputs.occ_f = Some(&occ.0);
                    inputs.occ_b = Some(&occ.1);
                }
                Stage::Stage2V1 => {
                    inputs.occ_f = Some(&occ.0);
                    inputs.occ_b = Some(&occ.1);
                    inputs.teacher_f = guide.flow_f.as_ref();
                    inputs.teacher_b = guide.flow_b.as_ref();
                    inputs.hallucinated_f = Some(&halluc.0);
                    inputs.hallucinated_b = Some(&halluc.1);
                }
                Stage::Stage2V2 => {
                    inputs.teacher_f = guide.flow_f.as_ref();
                    inputs.teacher_b = guide.flow_b.as_ref();
                    inputs.confidence_f = guide.mask_f.as_ref();
                    inputs.confidence_b = guide.mask_b.as_ref();
                }
                Stage::Supervised => {
                    inputs.ground_truth = guide.flow_f.as_ref();
                    inputs.valid = guide.mask_f.as_ref();
                }
            }
            let report = objective.evaluate(&inputs).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { level, iteration: it },
                other => other,
            })?;
            let epe = match gt {
                Some(g) => Some(eval::epe(&w_f, g, &MaskMap::filled(h, w, 1.0)?)?),
                None => None,
            };
            trace.push(TraceEntry { level, iteration: it, loss: report.value, epe });

            let n = h * w * 2;
            params[..n].copy_from_slice(w_f.data());
            params[n..].copy_from_slice(w_b.data());
            let mut grad = Vec::with_capacity(2 * n);
            grad.extend_from_slice(report.grad_wf.data());
            grad.extend_from_slice(report.grad_wb.data());
            adam.step(&mut params, &grad, opt.step_at(it), opt);
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { level, iteration: it });
            }
            w_f.data_mut().copy_from_slice(&params[..n]);
            w_b.data_mut().copy_from_slice(&params[n..]);

            let remaining = n_iter - (it + 1);
            if level == finest && remaining.is_multiple_of(refresh) && remaining / refresh < cfg.checkpoints {
                checkpoints.push((w_f.clone(), w_b.clone()));
            }
        }
    }
    let occ_f = occlusion_from_consistency(&w_f, &w_b, a1, a2)?;
    let occ_b = occlusion_from_consistency(&w_b, &w_f, a1, a2)?;
    Ok(FlowSolution { w_f, w_b, occ_f, occ_b, trace, checkpoints, occlusion_refreshes: refreshes, hallucinated })
}

/// Teacher output: flows in both directions with their occlusion and
/// confidence maps.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPrediction {
    pub w_f: FlowField,
    pub w_b: FlowField,
    pub occ_f: MaskMap,
    pub occ_b: MaskMap,
    pub conf_f: MaskMap,
    pub conf_b: MaskMap,
    /// Run id and checkpoint tag.
    pub provenance: String,
}

impl TeacherPrediction {
    /// Derives occlusion and confidence from the flows.
    pub fn from_flows(w_f: FlowField, w_b: FlowField, loss: &LossConfig, provenance: impl Into<String>) -> Result<TeacherPrediction> {
        ensure_same_shape("prediction flows", w_f.shape(), w_b.shape())?;
        let occ_f = occlusion_from_consistency(&w_f, &w_b, loss.alpha1, loss.alpha2)?;
        let occ_b = occlusion_from_consistency(&w_b, &w_f, loss.alpha1, loss.alpha2)?;
        Ok(TeacherPrediction {
            conf_f: confidence_map(&occ_f),
            conf_b: confidence_map(&occ_b),
            w_f,
            w_b,
            occ_f,
            occ_b,
            provenance: provenance.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w_f.shape()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        io::flow_write(&self.w_f, dir.join("flow_fwd.flo"))?;
        io::flow_write(&self.w_b, dir.join("flow_bwd.flo"))?;
        io::write_mask_pgm(&self.occ_f, dir.join("occ_fwd.pgm"))?;
        io::write_mask_pgm(&self.occ_b, dir.join("occ_bwd.pgm"))?;
        io::write_mask_pgm(&self.conf_f, dir.join("conf_fwd.pgm"))?;
        io::write_mask_pgm(&self.conf_b, dir.join("conf_bwd.pgm"))?;
        io::write_atomic(&dir.join("provenance.txt"), format!("{}\n", self.provenance).as_bytes())
    }

    /// Loads flows and provenance and rederives the masks.
    pub fn load(dir: impl AsRef<Path>, loss: &LossConfig) -> Result<TeacherPrediction> {
        let dir = dir.as_ref();
        let w_f = io::flow_read(dir.join("flow_fwd.flo"))?;
        let w_b = io::flow_read(dir.join("flow_bwd.flo"))?;
        let provenance = std::fs::read_to_string(dir.join("provenance.txt")).unwrap_or_default();
        TeacherPrediction::from_flows(w_f, w_b, loss, provenance.trim())
    }
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub prediction: TeacherPrediction,
    /// Trailing iterates, oldest first; the last equals the prediction.
    pub checkpoints: Vec<TeacherPrediction>,
    pub trace: Vec<TraceEntry>,
}

/// Stage 1: unsupervised optimization of both flows for one pair.
pub fn train_teacher(i1: &Image, i2: &Image, cfg: &TrainConfig, seed: u64) -> Result<TeacherRun> {
    train_teacher_traced(i1, i2, None, cfg, seed)
}

/// As [`train_teacher`], recording the EPE against `ground_truth` in the trace.
pub fn train_teacher_traced(
    i1: &Image,
    i2: &Image,
    ground_truth: Option<&FlowField>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TeacherRun> {
    let problem = Problem { ground_truth, ..Problem::new(i1, i2, Guidance::Unsupervised) };
    let sol = optimize_flow(&problem, cfg, seed)?;
    let run = format!("teacher-seed{seed}");
    let checkpoints = sol
        .checkpoints
        .into_iter()
        .enumerate()
        .map(|(k, (f, b))| TeacherPrediction::from_flows(f, b, &cfg.loss, format!("{run}/ckpt{}", k + 1)))
        .collect::<Result<Vec<_>>>()?;
    let prediction = TeacherPrediction::from_flows(sol.w_f, sol.w_b, &cfg.loss, format!("{run}/final"))?;
    Ok(TeacherRun { prediction, checkpoints, trace: sol.trace })
}

/// Trains one teacher per seed, in parallel. Results follow the seed order.
pub fn train_teachers(i1: &Image, i2: &Image, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<TeacherRun>> {
    seeds.par_iter().map(|&s| train_teacher(i1, i2, cfg, s)).collect()
}

/// Model distillation: averages member flows and rederives the masks.
pub fn ensemble(predictions: &[&TeacherPrediction], loss: &LossConfig) -> Result<TeacherPrediction> {
    let first = predictions.first().ok_or_else(|| Error::InvalidParameter("ensemble of zero predictions".into()))?;
    for p in predictions {
        ensure_same_shape("ensemble members", first.shape(), p.shape())?;
    }
    let fwd: Vec<&FlowField> = predictions.iter().map(|p| &p.w_f).collect();
    let bwd: Vec<&FlowField> = predictions.iter().map(|p| &p.w_b).collect();
    let provenance = format!(
        "ensemble[{}]",
        predictions.iter().map(|p| p.provenance.as_str()).collect::<Vec<_>>().join(",")
    );
    TeacherPrediction::from_flows(FlowField::mean(&fwd)?, FlowField::mean(&bwd)?, loss, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentVariant {
    /// Photometric loss plus distillation on hallucinated occlusions.
    OcclusionView,
    /// Distillation on every teacher-confident pixel.
    ConfidenceView,
}

impl std::str::FromStr for StudentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(StudentVariant::OcclusionView),
            "v2" => Ok(StudentVariant::ConfidenceView),
            _ => Err(Error::InvalidParameter(format!("unknown variant {s} (expected v1 or v2)"))),
        }
    }
}

impl std::fmt::Display for StudentVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudentVariant::OcclusionView => "v1",
            StudentVariant::ConfidenceView => "v2",
        })
    }
}

/// Teacher outputs carried into the student frame.
#[derive(Clone, Debug)]
pub struct TransformedTeacher {
    pub w_f: FlowField,
    pub w_b: FlowField,
    /// Out-of-source pixels count as occluded.
    pub occ_f: MaskMap,
    pub occ_b: MaskMap,
    /// Zero wherever the transformed flow had no source.
    pub conf_f: MaskMap,
    pub conf_b: MaskMap,
}

pub fn transform_teacher(teacher: &TeacherPrediction, bundle: &TransformBundle) -> Result<TransformedTeacher> {
    let (a, shape) = (&bundle.affine, bundle.output_shape);
    let (w_f, valid_f) = transform_flow(&teacher.w_f, a, shape)?;
    let (w_b, valid_b) = transform_flow(&teacher.w_b, a, shape)?;
    Ok(TransformedTeacher {
        w_f,
        w_b,
        occ_f: transform_mask(&teacher.occ_f, a, shape, 1.0)?,
        occ_b: transform_mask(&teacher.occ_b, a, shape, 1.0)?,
        conf_f: transform_mask(&teacher.conf_f, a, shape, 0.0)?.and(&valid_f)?,
        conf_b: transform_mask(&teacher.conf_b, a, shape, 0.0)?.and(&valid_b)?,
    })
}

#[derive(Clone, Debug)]
pub struct StudentReport {
    pub variant: StudentVariant,
    /// Hallucinated-occlusion pixels at the last refresh (variant 1 only).
    pub hallucinated_f: usize,
    pub hallucinated_b: usize,
    /// Teacher-confident pixels used as targets.
    pub confident_f: usize,
    pub confident_b: usize,
    /// Times the student's own occlusion maps were computed during training;
    /// always zero for variant 2.
    pub occlusion_refreshes: usize,
    pub final_loss: f64,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug)]
pub struct StudentOutcome {
    pub w_f: FlowField,
    pub w_b: FlowField,
    pub pair: TransformedPair,
    pub teacher: TransformedTeacher,
    pub report: StudentReport,
}

/// Stage 2: optimizes student flows on the transformed pair against the
/// transformed teacher prediction.
pub fn train_student(
    i1: &Image,
    i2: &Image,
    teacher: &TeacherPrediction,
    bundle: &TransformBundle,
    variant: StudentVariant,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StudentOutcome> {
    ensure_same_shape("student pair", i1.shape(), i2.shape())?;
    ensure_same_shape("student teacher", i1.shape(), teacher.shape())?;
    let pair = apply_bundle(i1, i2, bundle)?;
    let t = transform_teacher(teacher, bundle)?;
    let guidance = match variant {
        StudentVariant::OcclusionView => Guidance::Occlusion {
            teacher_f: &t.w_f,
            teacher_b: &t.w_b,
            teacher_occ_f: &t.occ_f,
            teacher_occ_b: &t.occ_b,
        },
        StudentVariant::ConfidenceView => Guidance::Confidence {
            teacher_f: &t.w_f,
            teacher_b: &t.w_b,
            confidence_f: &t.conf_f,
            confidence_b: &t.conf_b,
        },
    };
    let mut problem = Problem::new(&pair.i1, &pair.i2, guidance);
    if cfg.student_init_from_teacher {
        problem.init = Some((&t.w_f, &t.w_b));
    }
    let sol = optimize_flow(&problem, cfg, seed)?;
    let report = StudentReport {
        variant,
        hallucinated_f: sol.hallucinated.0,
        hallucinated_b: sol.hallucinated.1,
        confident_f: t.conf_f.count_set(),
        confident_b: t.conf_b.count_set(),
        occlusion_refreshes: sol.occlusion_refreshes,
        final_loss: sol.trace.last().map_or(f64::NAN, |e| e.loss),
        trace: sol.trace,
    };
    Ok(StudentOutcome { w_f: sol.w_f, w_b: sol.w_b, pair, teacher: t, report })
}

/// Supervised fine-tuning of the forward flow from `init` at full resolution,
/// with smoothness at unlabeled pixels. The backward flow is returned as given.
pub fn finetune_supervised(
    i1: &Image,
    i2: &Image,
    ground_truth: &FlowField,
    valid: &MaskMap,
    init: (&FlowField, &FlowField),
    cfg: &TrainConfig,
) -> Result<(FlowField, FlowField, Vec<TraceEntry>)> {
    if valid.count_set() == 0 {
        return Err(Error::DegenerateMask("no labeled pixels to fine-tune on".into()));
    }
    let problem = Problem {
        init: Some(init),
        ..Problem::new(i1, i2, Guidance::Labels { ground_truth, valid })
    };
    let single = TrainConfig { pyramid: PyramidSpec::single(), ..cfg.clone() };
    let sol = optimize_flow(&problem, &single, 0)?;
    Ok((sol.w_f, init.1.clone(), sol.trace))
}

/// How real-labeled pairs are repeated to balance self-annotated ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemiSchedule {
    pub n_labeled: usize,
    pub n_self_annotated: usize,
    pub repeat_factor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Presentation {
    Labeled(usize),
    SelfAnnotated(usize),
}

/// `repeat_factor = max(1, round(n2 / n1))`; zero when there are no labeled pairs.
pub fn build_semi_schedule(n_labeled: usize, n_self_annotated: usize) -> Result<SemiSchedule> {
    if n_labeled == 0 && n_self_annotated == 0 {
        return Err(Error::InvalidParameter("semi-supervised schedule needs at least one pair".into()));
    }
    let repeat_factor = if n_labeled == 0 {
        0
    } else {
        ((n_self_annotated as f64 / n_labeled as f64).round() as usize).max(1)
    };
    Ok(SemiSchedule { n_labeled, n_self_annotated, repeat_factor })
}

impl SemiSchedule {
    /// One shuffled epoch: every labeled pair `repeat_factor` times and every
    /// self-annotated pair once.
    pub fn epoch(&self, seed: u64) -> Vec<Presentation> {
        let mut out: Vec<Presentation> = (0..self.n_labeled)
            .flat_map(|i| std::iter::repeat_n(Presentation::Labeled(i), self.repeat_factor))
            .chain((0..self.n_self_annotated).map(Presentation::SelfAnnotated))
            .collect();
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_scene, SceneSpec};
    use crate::transform::{AffineTransform, TransformBundle};

    fn small_cfg(iterations: usize) -> TrainConfig {
        TrainConfig { optimizer: OptimizerConfig::with_iterations(iterations), ..TrainConfig::default() }
    }

    fn ones(h: usize, w: usize) -> MaskMap {
        MaskMap::filled(h, w, 1.0).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let p = PyramidSpec::default();
        assert_eq!(p.shapes(96, 128).unwrap(), vec![(24, 32), (48, 64), (96, 128)]);
        assert_eq!(p.shapes(20, 30).unwrap(), vec![(10, 15), (20, 30)]);
        assert!(PyramidSpec { scale_factor: 1.0, ..p }.validate().is_err());
    }

    #[test]
    fn step_schedule() {
        let o = OptimizerConfig::with_iterations(100);
        assert_eq!(o.step_at(0), 0.05);
        assert_eq!(o.step_at(60), 0.025);
        assert_eq!(o.step_at(90), 0.0125);
        assert_eq!(o.pretrain_iterations, 10);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let s = make_scene(&SceneSpec::static_background(32, 40, 1)).unwrap();
        let run = train_teacher(&s.i1, &s.i2, &small_cfg(150), 3).unwrap();
        let zero = FlowField::zeros(32, 40).unwrap();
        assert!(eval::epe(&run.prediction.w_f, &zero, &ones(32, 40)).unwrap() < 0.1);
        assert!(run.prediction.occ_f.count_set() < 32 * 40 / 20);
    }

    #[test]
    fn translation_converges() {
        let s = make_scene(&SceneSpec::translation(48, 64, 2.0, 0.0, 5)).unwrap();
        let run = train_teacher(&s.i1, &s.i2, &small_cfg(300), 1).unwrap();
        let noc = s.occ_fwd.complement();
        let e = eval::epe(&run.prediction.w_f, &s.flow_fwd, &noc).unwrap();
        assert!(e < 0.5, "epe {e}");
        let f = eval::occlusion_f_measure(&run.prediction.occ_f, &s.occ_fwd, &ones(48, 64)).unwrap();
        assert!(f >= 0.8, "occlusion F {f}");
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let s = make_scene(&SceneSpec::translation(24, 32, 1.0, 0.0, 2)).unwrap();
        let cfg = small_cfg(40);
        let a = train_teacher(&s.i1, &s.i2, &cfg, 1).unwrap();
        let b = train_teacher(&s.i1, &s.i2, &cfg, 1).unwrap();
        let c = train_teacher(&s.i1, &s.i2, &cfg, 2).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_ne!(a.prediction.w_f, c.prediction.w_f);
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.checkpoints.last().unwrap().w_f, a.prediction.w_f);
        let par = train_teachers(&s.i1, &s.i2, &cfg, &[1, 2]).unwrap();
        assert_eq!(par[0].prediction, a.prediction);
        assert_eq!(par[1].prediction, c.prediction);
    }

    #[test]
    fn all_occluded_is_detected() {
        let s = make_scene(&SceneSpec::translation(24, 32, 1.0, 0.0, 2)).unwrap();
        let mut cfg = small_cfg(40);
        cfg.optimizer.pretrain_iterations = 0;
        cfg.optimizer.init_noise = 0.5;
        cfg.loss.alpha1 = 0.0;
        cfg.loss.alpha2 = 1e-12;
        let err = train_teacher(&s.i1, &s.i2, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask(_)), "{err}");
    }

    #[test]
    fn huge_step_diverges_or_errors() {
        let s = make_scene(&SceneSpec::translation(24, 32, 1.0, 0.0, 2)).unwrap();
        let mut cfg = small_cfg(20);
        cfg.optimizer.step_size = f64::MAX;
        let err = train_teacher(&s.i1, &s.i2, &cfg, 0).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn ensemble_rules() {
        let loss = LossConfig::default();
        let w = FlowField::from_fn(10, 12, |x, y| (0.1 * x as f64, -0.05 * y as f64)).unwrap();
        let p = TeacherPrediction::from_flows(w.clone(), w.negated(), &loss, "a").unwrap();
        let single = ensemble(&[&p], &loss).unwrap();
        assert_eq!(single.w_f, p.w_f);
        assert_eq!(single.occ_f, p.occ_f);
        let q = TeacherPrediction::from_flows(w.negated(), w.clone(), &loss, "b").unwrap();
        let mean = ensemble(&[&p, &q], &loss).unwrap();
        assert!(mean.w_f.data().iter().all(|&v| v == 0.0));
        assert!(ensemble(&[], &loss).is_err());
        for (o, c) in mean.occ_f.data().iter().zip(mean.conf_f.data()) {
            assert_eq!(o + c, 1.0);
        }
    }

    #[test]
    fn identity_student_matches_perfect_teacher() {
        let s = make_scene(&SceneSpec::translation(32, 48, 2.0, 1.0, 8)).unwrap();
        let loss = LossConfig::default();
        let teacher = TeacherPrediction::from_flows(s.flow_fwd.clone(), s.flow_bwd.clone(), &loss, "gt").unwrap();
        let bundle = TransformBundle::identity((32, 48));
        let cfg = small_cfg(150);
        for variant in [StudentVariant::OcclusionView, StudentVariant::ConfidenceView] {
            let out = train_student(&s.i1, &s.i2, &teacher, &bundle, variant, &cfg, 4).unwrap();
            let e = eval::epe(&out.w_f, &s.flow_fwd, &teacher.conf_f).unwrap();
            assert!(e < 0.2, "{variant}: {e}");
        }
    }

    #[test]
    fn v2_never_reads_student_occlusion() {
        let s = make_scene(&SceneSpec::translation(24, 32, 1.0, 0.0, 3)).unwrap();
        let loss = LossConfig::default();
        let teacher = TeacherPrediction::from_flows(s.flow_fwd.clone(), s.flow_bwd.clone(), &loss, "gt").unwrap();
        let bundle = TransformBundle { affine: AffineTransform::translation(3.0, 2.0), ..TransformBundle::identity((18, 24)) };
        let cfg = small_cfg(60);
        let v2 = train_student(&s.i1, &s.i2, &teacher, &bundle, StudentVariant::ConfidenceView, &cfg, 0).unwrap();
        assert_eq!(v2.report.occlusion_refreshes, 0);
        let v1 = train_student(&s.i1, &s.i2, &teacher, &bundle, StudentVariant::OcclusionView, &cfg, 0).unwrap();
        assert!(v1.report.occlusion_refreshes > 0);
        assert_eq!(v1.pair.i1.shape(), (18, 24));
    }

    #[test]
    fn finetune_rules() {
        let s = make_scene(&SceneSpec::translation(24, 32, 1.0, -1.0, 3)).unwrap();
        let cfg = small_cfg(50);
        let (wf, wb, trace) =
            finetune_supervised(&s.i1, &s.i2, &s.flow_fwd, &ones(24, 32), (&s.flow_fwd, &s.flow_bwd), &cfg).unwrap();
        assert!(eval::epe(&wf, &s.flow_fwd, &ones(24, 32)).unwrap() < 1e-3);
        assert_eq!(wb, s.flow_bwd);
        assert!(trace[0].loss <= trace.last().unwrap().loss + 1e-12);
        let empty = MaskMap::filled(24, 32, 0.0).unwrap();
        let zero = FlowField::zeros(24, 32).unwrap();
        assert!(finetune_supervised(&s.i1, &s.i2, &s.flow_fwd, &empty, (&zero, &zero), &cfg).is_err());
    }

    #[test]
    fn sparse_labels_benefit_from_smoothness() {
        let s = make_scene(&SceneSpec::translation(24, 32, 2.0, -1.0, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let valid = MaskMap::from_fn(24, 32, |_, _| rng.random_bool(0.1) as u8 as f64).unwrap();
        let zero = FlowField::zeros(24, 32).unwrap();
        let cfg = small_cfg(300);
        let no_smooth = TrainConfig { loss: LossConfig { smooth_weight: 0.0, ..cfg.loss.clone() }, ..cfg.clone() };
        let unlabeled = valid.complement();
        let (a, _, _) = finetune_supervised(&s.i1, &s.i2, &s.flow_fwd, &valid, (&zero, &zero), &cfg).unwrap();
        let (b, _, _) = finetune_supervised(&s.i1, &s.i2, &s.flow_fwd, &valid, (&zero, &zero), &no_smooth).unwrap();
        let ea = eval::epe(&a, &s.flow_fwd, &unlabeled).unwrap();
        let eb = eval::epe(&b, &s.flow_fwd, &unlabeled).unwrap();
        assert!(ea < eb, "{ea} vs {eb}");
    }

    #[test]
    fn semi_schedule_examples() {
        assert_eq!(build_semi_schedule(10, 100).unwrap().repeat_factor, 10);
        assert_eq!(build_semi_schedule(5, 5).unwrap().repeat_factor, 1);
        assert_eq!(build_semi_schedule(7, 100).unwrap().repeat_factor, 14);
        assert_eq!(build_semi_schedule(100, 10).unwrap().repeat_factor, 1);
        assert!(build_semi_schedule(0, 0).is_err());
        let s = build_semi_schedule(10, 100).unwrap();
        let epoch = s.epoch(1);
        let labeled = epoch.iter().filter(|p| matches!(p, Presentation::Labeled(_))).count();
        assert_eq!((labeled, epoch.len() - labeled), (100, 100));
        assert_eq!(epoch, s.epoch(1));
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_to_csv(&[TraceEntry { level: 0, iteration: 3, loss: 0.5, epe: None }]);
        assert_eq!(csv, "iteration,level,loss,epe\n3,0,0.5,\n");
    }
}

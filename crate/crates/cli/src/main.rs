mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use distillflow::engine::{
    build_semi_schedule, ensemble, finetune_supervised, train_student, train_teacher_traced, trace_to_csv,
    Presentation, StudentVariant, TeacherPrediction, TraceEntry,
};
use distillflow::eval::{d1_rate, flow_report, rows_to_csv, MetricRow, RegionSplit};
use distillflow::io::{flow_read, flow_write, read_image, read_mask_pgm, write_atomic, write_image, write_mask_pgm};
use distillflow::synth::{horizontal_translation_spec, make_scene, random_translation_spec};
use distillflow::transform::{sample_transform, transform_flow, transform_mask, TransformBundle};
use distillflow::viz::{error_map, flow_to_color, side_by_side, MaxMagnitude};
use distillflow::{flow_to_disparity, occlusion_from_consistency, FlowField, Image, MaskMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::{ConfigError, RunConfig, SynthMotion};

#[derive(Parser)]
#[command(name = "distillflow", version, about = "Self-supervised optical flow by knowledge distillation")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` setting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with exact ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 unsupervised optimization, one run per seed.
    Teacher {
        /// Directory holding i1.png and i2.png (ground truth optional).
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average teacher predictions.
    Ensemble {
        /// Comma-separated prediction directories.
        #[arg(long, value_delimiter = ',', required = true)]
        members: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 distillation on a transformed pair.
    Student {
        #[arg(long)]
        pair: PathBuf,
        /// Teacher prediction directory.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// v1 distills on hallucinated occlusions, v2 on all confident pixels.
        #[arg(long, default_value = "v2")]
        variant: String,
        /// Recorded transform bundle to reuse instead of sampling one.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Supervised fine-tuning on labeled pairs.
    Finetune {
        /// Labeled pair directory (repeatable); needs flow_fwd.flo.
        #[arg(long, required = true)]
        pair: Vec<PathBuf>,
        /// Initial prediction per labeled pair (repeatable); zero when omitted.
        #[arg(long)]
        init: Vec<PathBuf>,
        /// Mix in self-annotated pairs with a balanced schedule.
        #[arg(long)]
        semi: bool,
        /// Self-annotated pair as PAIR_DIR:PREDICTION_DIR (repeatable, with --semi).
        #[arg(long)]
        pseudo: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric CSV from a prediction and ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Directory with flow_fwd.flo and optionally occ_fwd.pgm and valid.pgm.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report D1 on the disparity derived from the horizontal flow.
        #[arg(long)]
        disparity: bool,
    },
    /// Flow color images and error maps.
    Viz {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Teacher { .. } => "teacher",
            Command::Ensemble { .. } => "ensemble",
            Command::Student { .. } => "student",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Viz { .. } => "viz",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Synth { out }
            | Command::Teacher { out, .. }
            | Command::Ensemble { out, .. }
            | Command::Student { out, .. }
            | Command::Finetune { out, .. }
            | Command::Eval { out, .. }
            | Command::Viz { out, .. } => out,
        }
    }
}

/// A usage problem detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

/// 1 usage, 2 numerical failure, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<distillflow::Error>() {
            return if e.is_numerical() {
                2
            } else if e.is_io() {
                3
            } else {
                1
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<Usage>() || cause.is::<ConfigError>() {
            return 1;
        }
    }
    1
}

/// Output directory built under a sibling temporary name and moved into
/// place only on success; dropped unfinished, it is removed.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(out: &Path) -> Result<Staging> {
        let name = out
            .file_name()
            .ok_or_else(|| usage(format!("output path {} has no final component", out.display())))?;
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Staging { tmp, out: out.to_path_buf(), committed: false })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.tmp.join(rel)
    }

    fn commit(mut self) -> Result<()> {
        if self.out.exists() {
            fs::remove_dir_all(&self.out).with_context(|| format!("replacing {}", self.out.display()))?;
        }
        fs::rename(&self.tmp, &self.out).with_context(|| format!("moving results to {}", self.out.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if seed.is_some() {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn load_pair(dir: &Path) -> Result<(Image, Image)> {
    let i1 = read_image(dir.join("i1.png")).with_context(|| format!("pair {}", dir.display()))?;
    let i2 = read_image(dir.join("i2.png")).with_context(|| format!("pair {}", dir.display()))?;
    Ok((i1, i2))
}

fn optional_flow(path: PathBuf) -> Result<Option<FlowField>> {
    if path.exists() {
        Ok(Some(flow_read(&path)?))
    } else {
        Ok(None)
    }
}

fn optional_mask(path: PathBuf) -> Result<Option<MaskMap>> {
    if path.exists() {
        Ok(Some(read_mask_pgm(&path)?))
    } else {
        Ok(None)
    }
}

fn write_trace(path: PathBuf, trace: &[TraceEntry]) -> Result<()> {
    Ok(write_atomic(&path, trace_to_csv(trace).as_bytes())?)
}

fn run_synth(cfg: &RunConfig, stage: &Staging) -> Result<()> {
    let s = &cfg.synth;
    for k in 0..s.count {
        let seed = cfg.seed + k as u64;
        let spec = match s.motion {
            SynthMotion::Random => random_translation_spec(s.height, s.width, s.layers, s.max_shift, seed)?,
            SynthMotion::Horizontal => horizontal_translation_spec(s.height, s.width, s.horizontal_base, s.layers, seed)?,
        };
        make_scene(&spec)?.save(stage.path(format!("scene{k}")))?;
    }
    println!("wrote {} scene(s)", s.count);
    Ok(())
}

fn run_teacher(cfg: &RunConfig, pair: &Path, stage: &Staging) -> Result<()> {
    let (i1, i2) = load_pair(pair)?;
    let gt = optional_flow(pair.join("flow_fwd.flo"))?;
    for seed in cfg.seed..cfg.seed + cfg.teacher_runs as u64 {
        let run = train_teacher_traced(&i1, &i2, gt.as_ref(), &cfg.train, seed)?;
        let dir = stage.path(format!("seed{seed}"));
        run.prediction.save(&dir)?;
        write_trace(dir.join("trace.csv"), &run.trace)?;
        for (k, ckpt) in run.checkpoints.iter().enumerate() {
            ckpt.save(dir.join(format!("ckpt{}", k + 1)))?;
        }
        let last = run.trace.last().map_or(f64::NAN, |e| e.loss);
        println!("teacher seed {seed}: final loss {last:.6}, {} checkpoints", run.checkpoints.len());
    }
    Ok(())
}

fn run_ensemble(cfg: &RunConfig, members: &[PathBuf], stage: &Staging) -> Result<()> {
    let loaded = members
        .iter()
        .map(|m| TeacherPrediction::load(m, cfg.loss()).with_context(|| format!("member {}", m.display())))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TeacherPrediction> = loaded.iter().collect();
    ensemble(&refs, cfg.loss())?.save(stage.path(""))?;
    println!("averaged {} member(s)", loaded.len());
    Ok(())
}

fn run_student(
    cfg: &RunConfig,
    pair: &Path,
    teacher: &Path,
    variant: &str,
    replay: Option<&Path>,
    stage: &Staging,
) -> Result<()> {
    let variant: StudentVariant = variant.parse().map_err(|e: distillflow::Error| usage(e.to_string()))?;
    let (i1, i2) = load_pair(pair)?;
    let teacher = TeacherPrediction::load(teacher, cfg.loss())?;
    let bundle = match replay {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading bundle {}", p.display()))?;
            TransformBundle::from_record(&text)?
        }
        None => sample_transform(&cfg.policy, i1.shape(), cfg.seed)?,
    };
    let out = train_student(&i1, &i2, &teacher, &bundle, variant, &cfg.train, cfg.seed)?;
    let loss = cfg.loss();
    write_atomic(&stage.path("bundle.txt"), bundle.to_record().as_bytes())?;
    flow_write(&out.w_f, stage.path("flow_fwd.flo"))?;
    flow_write(&out.w_b, stage.path("flow_bwd.flo"))?;
    write_mask_pgm(&occlusion_from_consistency(&out.w_f, &out.w_b, loss.alpha1, loss.alpha2)?, stage.path("occ_fwd.pgm"))?;
    write_mask_pgm(&occlusion_from_consistency(&out.w_b, &out.w_f, loss.alpha1, loss.alpha2)?, stage.path("occ_bwd.pgm"))?;
    write_image(&out.pair.i1, stage.path("i1.png"))?;
    write_image(&out.pair.i2, stage.path("i2.png"))?;
    write_trace(stage.path("trace.csv"), &out.report.trace)?;
    let r = &out.report;
    let report = format!(
        "variant = {}\nconfident_fwd = {}\nconfident_bwd = {}\nhallucinated_fwd = {}\nhallucinated_bwd = {}\nocclusion_refreshes = {}\nfinal_loss = {}\n",
        r.variant, r.confident_f, r.confident_b, r.hallucinated_f, r.hallucinated_b, r.occlusion_refreshes, r.final_loss
    );
    write_atomic(&stage.path("report.txt"), report.as_bytes())?;

    // Ground truth carried into the student frame, when the pair has it.
    if let Some(gt) = optional_flow(pair.join("flow_fwd.flo"))? {
        let shape = bundle.output_shape;
        let (gt_t, valid) = transform_flow(&gt, &bundle.affine, shape)?;
        let dir = stage.path("gt");
        fs::create_dir_all(&dir)?;
        flow_write(&gt_t, dir.join("flow_fwd.flo"))?;
        write_mask_pgm(&valid, dir.join("valid.pgm"))?;
        if let Some(occ) = optional_mask(pair.join("occ_fwd.pgm"))? {
            write_mask_pgm(&transform_mask(&occ, &bundle.affine, shape, 1.0)?, dir.join("occ_fwd.pgm"))?;
        }
    }
    println!("student {variant}: final loss {:.6}", r.final_loss);
    Ok(())
}

/// Labels for one pair: ground truth where `valid.pgm` allows, thinned to
/// the configured density.
fn labeled_target(cfg: &RunConfig, dir: &Path, salt: u64) -> Result<(FlowField, MaskMap)> {
    let gt = flow_read(dir.join("flow_fwd.flo")).with_context(|| format!("labeled pair {}", dir.display()))?;
    let (h, w) = gt.shape();
    let base = optional_mask(dir.join("valid.pgm"))?.unwrap_or(MaskMap::filled(h, w, 1.0)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let density = cfg.label_density;
    let keep = MaskMap::from_fn(h, w, |_, _| if density >= 1.0 || rng.random_bool(density) { 1.0 } else { 0.0 })?;
    Ok((gt, base.binarized().and(&keep)?))
}

fn initial_flows(path: Option<&PathBuf>, cfg: &RunConfig, shape: (usize, usize)) -> Result<(FlowField, FlowField)> {
    match path {
        Some(p) => {
            let t = TeacherPrediction::load(p, cfg.loss())?;
            Ok((t.w_f, t.w_b))
        }
        None => Ok((FlowField::zeros(shape.0, shape.1)?, FlowField::zeros(shape.0, shape.1)?)),
    }
}

struct Job {
    name: String,
    i1: Image,
    i2: Image,
    target: FlowField,
    valid: MaskMap,
    w_f: FlowField,
    w_b: FlowField,
    trace: Vec<TraceEntry>,
}

fn run_finetune(
    cfg: &RunConfig,
    pairs: &[PathBuf],
    inits: &[PathBuf],
    semi: bool,
    pseudo: &[String],
    stage: &Staging,
) -> Result<()> {
    if !inits.is_empty() && inits.len() != pairs.len() {
        return Err(usage(format!("{} --init given for {} --pair", inits.len(), pairs.len())));
    }
    if !semi && !pseudo.is_empty() {
        return Err(usage("--pseudo needs --semi"));
    }
    let mut jobs = vec![];
    for (i, dir) in pairs.iter().enumerate() {
        let (i1, i2) = load_pair(dir)?;
        let (target, valid) = labeled_target(cfg, dir, i as u64)?;
        let (w_f, w_b) = initial_flows(inits.get(i), cfg, i1.shape())?;
        jobs.push(Job { name: format!("labeled{i}"), i1, i2, target, valid, w_f, w_b, trace: vec![] });
    }
    for (j, spec) in pseudo.iter().enumerate() {
        let (pair, pred) = spec
            .split_once(':')
            .ok_or_else(|| usage(format!("--pseudo {spec:?} is not PAIR_DIR:PREDICTION_DIR")))?;
        let (i1, i2) = load_pair(Path::new(pair))?;
        let t = TeacherPrediction::load(pred, cfg.loss())?;
        jobs.push(Job {
            name: format!("self{j}"),
            i1,
            i2,
            target: t.w_f.clone(),
            valid: t.conf_f.clone(),
            w_f: t.w_f,
            w_b: t.w_b,
            trace: vec![],
        });
    }

    if semi {
        let schedule = build_semi_schedule(pairs.len(), pseudo.len())?;
        let mut train = cfg.train.clone();
        train.optimizer.iterations_per_level = cfg.finetune_iterations;
        train.optimizer.pretrain_iterations = 0;
        let mut log = format!("repeat_factor = {}\n", schedule.repeat_factor);
        for p in schedule.epoch(cfg.seed) {
            let job = match p {
                Presentation::Labeled(i) => &mut jobs[i],
                Presentation::SelfAnnotated(j) => &mut jobs[pairs.len() + j],
            };
            log.push_str(&format!("{}\n", job.name));
            let (w_f, w_b, trace) = finetune_supervised(&job.i1, &job.i2, &job.target, &job.valid, (&job.w_f, &job.w_b), &train)?;
            job.trace.extend(trace);
            (job.w_f, job.w_b) = (w_f, w_b);
        }
        write_atomic(&stage.path("schedule.txt"), log.as_bytes())?;
    } else {
        for job in &mut jobs {
            let (w_f, w_b, trace) = finetune_supervised(&job.i1, &job.i2, &job.target, &job.valid, (&job.w_f, &job.w_b), &cfg.train)?;
            (job.w_f, job.w_b, job.trace) = (w_f, w_b, trace);
        }
    }
    for job in &jobs {
        let dir = stage.path(&job.name);
        fs::create_dir_all(&dir)?;
        flow_write(&job.w_f, dir.join("flow_fwd.flo"))?;
        flow_write(&job.w_b, dir.join("flow_bwd.flo"))?;
        write_trace(dir.join("trace.csv"), &job.trace)?;
    }
    println!("fine-tuned {} pair(s)", jobs.len());
    Ok(())
}

fn run_eval(pred: &Path, gt_dir: &Path, disparity: bool, stage: &Staging) -> Result<()> {
    let flow = flow_read(pred.join("flow_fwd.flo"))?;
    let gt = flow_read(gt_dir.join("flow_fwd.flo"))?;
    let (h, w) = gt.shape();
    let gt_occ = optional_mask(gt_dir.join("occ_fwd.pgm"))?.unwrap_or(MaskMap::filled(h, w, 0.0)?);
    let valid = optional_mask(gt_dir.join("valid.pgm"))?;
    let pred_occ = optional_mask(pred.join("occ_fwd.pgm"))?;
    let split = RegionSplit::new(&gt_occ, valid.as_ref())?;
    let mut rows = flow_report(&flow, &gt, &split, pred_occ.as_ref(), &gt_occ)?;
    if disparity {
        let (d, d_gt) = (flow_to_disparity(&flow), flow_to_disparity(&gt));
        for (region, mask) in split.regions() {
            let n = mask.count_set();
            if n > 0 {
                rows.push(MetricRow { metric: "d1", region, value: d1_rate(&d, &d_gt, mask)?, pixel_count: n });
            }
        }
    }
    let csv = rows_to_csv(&rows);
    write_atomic(&stage.path("metrics.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn run_viz(pred: &Path, gt: Option<&Path>, stage: &Staging) -> Result<()> {
    let flow = flow_read(pred.join("flow_fwd.flo"))?;
    match gt {
        None => write_image(&flow_to_color(&flow, MaxMagnitude::Auto), stage.path("flow_fwd.png"))?,
        Some(dir) => {
            let gt = flow_read(dir.join("flow_fwd.flo"))?;
            // Shared scale so predicted and true colors are comparable.
            let max = gt.data().chunks_exact(2).map(|p| p[0].hypot(p[1])).fold(1e-6, f64::max);
            let pc = flow_to_color(&flow, MaxMagnitude::Fixed(max));
            let gc = flow_to_color(&gt, MaxMagnitude::Fixed(max));
            let err = error_map(&flow, &gt, 3.0)?;
            write_image(&pc, stage.path("flow_fwd.png"))?;
            write_image(&side_by_side(&[&pc, &gc, &err])?, stage.path("comparison.png"))?;
        }
    }
    println!("wrote visualizations");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let stage = Staging::new(cli.command.out())?;
    let echo = format!("# distillflow {}\n{}", cli.command.name(), cfg.to_text());
    write_atomic(&stage.path("config.txt"), echo.as_bytes())?;
    match &cli.command {
        Command::Synth { .. } => run_synth(&cfg, &stage)?,
        Command::Teacher { pair, .. } => run_teacher(&cfg, pair, &stage)?,
        Command::Ensemble { members, .. } => run_ensemble(&cfg, members, &stage)?,
        Command::Student { pair, teacher, variant, replay, .. } => {
            run_student(&cfg, pair, teacher, variant, replay.as_deref(), &stage)?
        }
        Command::Finetune { pair, init, semi, pseudo, .. } => run_finetune(&cfg, pair, init, *semi, pseudo, &stage)?,
        Command::Eval { pred, gt, disparity, .. } => run_eval(pred, gt, *disparity, &stage)?,
        Command::Viz { pred, gt, .. } => run_viz(pred, gt.as_deref(), &stage)?,
    }
    stage.commit()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

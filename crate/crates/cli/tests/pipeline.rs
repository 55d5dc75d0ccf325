use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
synth.height = 24
synth.width = 32
synth.layers = 1
synth.max_shift = 2
opt.iterations = 30
pyramid.levels = 2
teacher.runs = 1
train.checkpoints = 2
transform.superpixels = 30
finetune.iterations = 10
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distillflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.cfg");
        fs::write(&config, format!("{SMALL}{extra}")).unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Runs a subcommand with the workspace config.
    fn ok(&self, sub: &str, args: &[&str]) -> Output {
        let mut all = vec![sub, "--config", s(&self.config)];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn synth_and_teacher(&self) -> (PathBuf, PathBuf) {
        let scenes = self.path("scenes");
        self.ok("synth", &["--seed", "3", "--out", s(&scenes)]);
        let pair = scenes.join("scene0");
        let teacher = self.path("teacher");
        self.ok("teacher", &["--pair", s(&pair), "--seed", "1", "--out", s(&teacher)]);
        (pair, teacher.join("seed1"))
    }
}

#[test]
fn teacher_then_eval_produces_metrics() {
    let ws = Workspace::new("");
    let (pair, pred) = ws.synth_and_teacher();
    for f in ["i1.png", "i2.png", "flow_fwd.flo", "flow_bwd.flo", "occ_fwd.pgm", "occ_bwd.pgm"] {
        assert!(pair.join(f).exists(), "{f}");
    }
    for f in ["flow_fwd.flo", "occ_fwd.pgm", "conf_fwd.pgm", "trace.csv", "ckpt1/flow_fwd.flo", "ckpt2/flow_fwd.flo"] {
        assert!(pred.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(pred.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,level,loss,epe\n"));
    assert!(trace.lines().last().unwrap().split(',').nth(3).unwrap().parse::<f64>().is_ok());

    let config = fs::read_to_string(ws.path("teacher/config.txt")).unwrap();
    assert!(config.contains("opt.iterations = 30\n") && config.contains("seed = 1\n"));

    let metrics = ws.path("metrics");
    let out = ws.ok("eval", &["--pred", s(&pred), "--gt", s(&pair), "--out", s(&metrics), "--disparity"]);
    let csv = fs::read_to_string(metrics.join("metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    assert!(csv.starts_with("metric,region,value,pixel_count\n"));
    let epe_all: f64 = csv
        .lines()
        .find(|l| l.starts_with("epe,all,"))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(epe_all.is_finite() && epe_all < 3.0, "{epe_all}");
    assert!(csv.contains("\nocc_f,all,") && csv.contains("\nd1,all,"));

    let viz = ws.path("viz");
    ws.ok("viz", &["--pred", s(&pred), "--gt", s(&pair), "--out", s(&viz)]);
    assert!(viz.join("flow_fwd.png").exists() && viz.join("comparison.png").exists());
}

#[test]
fn single_member_ensemble_is_a_fixed_point() {
    let ws = Workspace::new("");
    let (_, pred) = ws.synth_and_teacher();
    let ens = ws.path("ens");
    ws.ok("ensemble", &["--members", s(&pred), "--out", s(&ens)]);
    for f in ["flow_fwd.flo", "flow_bwd.flo", "occ_fwd.pgm", "occ_bwd.pgm"] {
        assert_eq!(fs::read(pred.join(f)).unwrap(), fs::read(ens.join(f)).unwrap(), "{f}");
    }
    let members = format!("{},{}", s(&pred.join("ckpt1")), s(&pred.join("ckpt2")));
    ws.ok("ensemble", &["--members", &members, "--out", s(&ws.path("ens2"))]);
    let provenance = fs::read_to_string(ws.path("ens2/provenance.txt")).unwrap();
    assert!(provenance.contains("ckpt1") && provenance.contains("ckpt2"), "{provenance}");
}

#[test]
fn replayed_student_runs_are_bit_identical() {
    let ws = Workspace::new("");
    let (pair, pred) = ws.synth_and_teacher();
    let first = ws.path("student");
    ws.ok("student", &["--pair", s(&pair), "--teacher", s(&pred), "--seed", "5", "--variant", "v1", "--out", s(&first)]);
    let bundle = first.join("bundle.txt");
    let mut outputs = vec![first.clone()];
    for k in 0..2 {
        let out = ws.path(&format!("replay{k}"));
        ws.ok(
            "student",
            &["--pair", s(&pair), "--teacher", s(&pred), "--seed", "5", "--variant", "v1", "--replay", s(&bundle), "--out", s(&out)],
        );
        outputs.push(out);
    }
    for f in ["flow_fwd.flo", "flow_bwd.flo", "occ_fwd.pgm", "trace.csv", "report.txt", "bundle.txt", "config.txt", "gt/flow_fwd.flo"] {
        let reference = fs::read(first.join(f)).unwrap();
        for o in &outputs[1..] {
            assert_eq!(reference, fs::read(o.join(f)).unwrap(), "{f}");
        }
    }
    let report = fs::read_to_string(first.join("report.txt")).unwrap();
    assert!(report.starts_with("variant = v1\n"));

    // The echoed config replays the same run.
    let again = ws.path("from-echo");
    ok(&["student", "--config", s(&first.join("config.txt")), "--pair", s(&pair), "--teacher", s(&pred), "--variant", "v1", "--replay", s(&bundle), "--out", s(&again)]);
    assert_eq!(fs::read(first.join("flow_fwd.flo")).unwrap(), fs::read(again.join("flow_fwd.flo")).unwrap());
}

#[test]
fn finetune_plain_and_semi() {
    let ws = Workspace::new("finetune.label_density = 0.3\n");
    let (pair, pred) = ws.synth_and_teacher();
    let plain = ws.path("ft");
    ws.ok("finetune", &["--pair", s(&pair), "--init", s(&pred), "--out", s(&plain)]);
    assert!(plain.join("labeled0/flow_fwd.flo").exists());

    let semi = ws.path("semi");
    let pseudo = format!("{}:{}", s(&pair), s(&pred));
    let pseudo2 = format!("{}:{}", s(&pair), s(&pred.join("ckpt1")));
    ws.ok("finetune", &["--pair", s(&pair), "--semi", "--pseudo", &pseudo, "--pseudo", &pseudo2, "--out", s(&semi)]);
    let schedule = fs::read_to_string(semi.join("schedule.txt")).unwrap();
    assert!(schedule.starts_with("repeat_factor = 2\n"), "{schedule}");
    assert_eq!(schedule.lines().filter(|l| *l == "labeled0").count(), 2);
    assert_eq!(schedule.lines().filter(|l| l.starts_with("self")).count(), 2);
    assert!(semi.join("self1/flow_fwd.flo").exists());
}

#[test]
fn failures_map_to_exit_codes_and_leave_nothing_behind() {
    let ws = Workspace::new("");
    let bad = ws.path("bad.cfg");
    fs::write(&bad, "no.such.key = 1\n").unwrap();
    let out = ws.path("out");
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(run(&["synth", "--config", s(&bad), "--out", s(&out)])), 1);
    assert_eq!(code(run(&["synth"])), 1);
    assert_eq!(code(run(&["teacher", "--pair", s(&ws.path("missing")), "--out", s(&out)])), 3);

    let (pair, pred) = ws.synth_and_teacher();
    let wrong_variant = run(&["student", "--pair", s(&pair), "--teacher", s(&pred), "--variant", "v9", "--out", s(&out)]);
    assert_eq!(code(wrong_variant), 1);

    let diverge = ws.path("diverge.cfg");
    fs::write(&diverge, format!("{SMALL}opt.step_size = 1e308\n")).unwrap();
    assert_eq!(code(run(&["teacher", "--config", s(&diverge), "--pair", s(&pair), "--out", s(&out)])), 2);

    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(&ws.root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".partial-"))
        .collect();
    assert!(leftovers.is_empty());
    assert_eq!(code(run(&["--help"])), 0);
}

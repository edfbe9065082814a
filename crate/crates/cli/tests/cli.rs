use std::path::{Path, PathBuf};
use std::process::Command;

use permweave::align::PermutationPlan;
use permweave::merge::BarrierReport;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_permweave");

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn run(args: &[&str]) -> Run {
    run_env(args, &[])
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "model": {"num_layers": 2, "d_model": 8, "num_heads": 2, "d_ff": 16, "vocab_size": 24, "max_positions": 12},
        "seeds": [1, 2],
        "corpus": {"num_sequences": 80, "seq_len": 10, "seed": 3, "heldout_sequences": 20},
        "train": {"steps": 30, "batch_size": 4},
        "capture_budget": 400,
        "grid_points": 5,
        "task": {"train_sequences": 40, "eval_sequences": 20, "seq_len": 10, "steps": 10},
        "output_dir": dir.join("out")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = tiny_config(&root).display().to_string();
        Self { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Run {
        let mut full = vec!["--config", self.config.as_str()];
        full.extend_from_slice(args);
        run(&full)
    }

    fn ok(&self, args: &[&str]) -> String {
        let r = self.run(args);
        assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
        r.stdout
    }

    fn train(&self, seed: u64) -> String {
        let out = self.path(&format!("m{seed}.pwc"));
        self.ok(&["train", "--seed", &seed.to_string(), "--out", &out]);
        out
    }

    fn capture(&self, a: &str, b: &str, name: &str, extra: &[&str]) -> String {
        let out = self.path(name);
        let mut args = vec!["capture", "--a", a, "--b", b, "--out", out.as_str()];
        args.extend_from_slice(extra);
        self.ok(&args);
        out
    }
}

fn digest(path: &str) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn read_json(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_is_deterministic_per_seed() {
    let f = Fixture::new();
    let a = f.train(1);
    let again = f.path("again.pwc");
    f.ok(&["train", "--seed", "1", "--out", &again]);
    let b = f.train(2);
    assert_eq!(digest(&a), digest(&again));
    assert_ne!(digest(&a), digest(&b));
    let meta = read_json(&format!("{a}.json"));
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["config"]["seeds"], json!([1, 2]));
}

#[test]
fn missing_config_is_usage_error() {
    let r = run(&["--config", "/nonexistent/permweave.json", "train", "--seed", "1", "--out", "/tmp/x.pwc"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("cannot read config"), "{}", r.stderr);
    let r = run(&["train", "--out", "/tmp/x.pwc"]);
    assert_eq!(r.code, 2, "missing flag");
    let r = run_env(&["inspect", "--model", "/nonexistent"], &[("PERMWEAVE_THREADS", "0")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("PERMWEAVE_THREADS"));
}

#[test]
fn corrupted_checkpoint_header_is_rejected() {
    let f = Fixture::new();
    let a = f.train(1);
    let out = f.ok(&["inspect", "--model", &a]);
    assert!(out.contains("\"parameters\""));
    let bytes = std::fs::read(&a).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_len = bytes.clone();
    bad_len[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
    let mut bad_json = bytes.clone();
    bad_json[12] = b'!';
    for (name, data) in [("magic", bad_magic), ("len", bad_len), ("json", bad_json), ("trunc", bytes[..20].to_vec())] {
        let p = f.path(&format!("bad-{name}.pwc"));
        std::fs::write(&p, data).unwrap();
        let r = f.run(&["inspect", "--model", &p]);
        assert_eq!(r.code, 2, "{name}: {}", r.stderr);
        assert!(r.stderr.contains("cannot load checkpoint"));
    }
}

#[test]
fn capture_budget_and_determinism() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let r = f.run(&["capture", "--a", &a, "--b", &b, "--out", &f.path("zero.pws"), "--budget", "0"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("no tokens captured"), "{}", r.stderr);

    let s1 = f.capture(&a, &b, "s1.pws", &["--budget", "200"]);
    let s2 = f.capture(&a, &b, "s2.pws", &["--budget", "400"]);
    let s1b = f.capture(&a, &b, "s1b.pws", &["--budget", "200"]);
    assert_eq!(digest(&s1), digest(&s1b));
    let n = |p: &str| {
        let stats = permweave::activations::load_stats(p).unwrap();
        stats.values().next().unwrap().n()
    };
    assert_eq!(n(&s1), 200);
    assert_eq!(n(&s2), 400);
}

#[test]
fn align_component_selection_and_errors() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let stats = f.capture(&a, &b, "s.pws", &[]);

    let r = f.run(&["align", "--stats", &stats, "--out", &f.path("p.json"), "--components"]);
    assert_eq!(r.code, 2, "{}", r.stderr);

    let plan_path = f.path("ff.json");
    f.ok(&["align", "--stats", &stats, "--out", &plan_path, "--components", "ff"]);
    let plan = read_json(&plan_path);
    assert_eq!(plan["mha_mode"], "identity");
    assert_eq!(plan["residual_mode"], "identity");
    assert!(plan["residual"].is_null());
    let parsed = PermutationPlan::from_json(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert!(parsed.mha.iter().all(|m| m.expand().is_identity()));

    let partial = f.capture(&a, &b, "partial.pws", &["--points", "ff_hidden.0,ff_hidden.1"]);
    let r = f.run(&[
        "align",
        "--stats",
        &partial,
        "--out",
        &f.path("first.json"),
        "--components",
        "residual",
        "--residual-mode",
        "first",
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("post_embedding"), "{}", r.stderr);

    let r = f.run(&["align", "--stats", &f.path("missing.pws"), "--out", &f.path("x.json")]);
    assert_eq!(r.code, 2);
}

#[test]
fn barrier_reports_and_baseline() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));

    let prefix = f.path("self");
    f.ok(&["barrier", "--a", &a, "--b", &a, "--out", &prefix]);
    let csv = std::fs::read_to_string(format!("{prefix}.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5 + 2);
    let report = BarrierReport::from_csv(&csv).unwrap();
    assert!(report.barrier.abs() <= 1e-5);
    assert!(std::path::Path::new(&format!("{prefix}.vanilla.json")).exists());

    let stats = f.capture(&a, &b, "s.pws", &[]);
    let plan_path = f.path("plan.json");
    f.ok(&["align", "--stats", &stats, "--out", &plan_path, "--components", "ff,mha", "--mha-mode", "monotonic"]);
    let prefix = f.path("ab");
    let out = f.ok(&["barrier", "--a", &a, "--b", &b, "--plan", &plan_path, "--out", &prefix]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert!(summary["barrier"].is_number() && summary["vanilla_barrier"].is_number());
    let report = read_json(&format!("{prefix}.json"));
    let mut strategy = read_json(&plan_path);
    for k in ["ff", "mha", "residual"] {
        strategy.as_object_mut().unwrap().remove(k);
    }
    assert_eq!(report["metadata"]["plan"], strategy);
    assert_eq!(report["metadata"]["plan"]["mha_mode"], "monotonic");
    let vanilla = read_json(&format!("{prefix}.vanilla.json"));
    assert_eq!(vanilla["metadata"]["plan"]["mha_mode"], "identity");
    // Both reports share the λ = 1 endpoint (model A).
    assert_eq!(report["losses"][4], vanilla["losses"][4]);
}

#[test]
fn invalid_plans_need_override() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let stats = f.capture(&a, &b, "s.pws", &[]);
    let plan_path = f.path("sep.json");
    f.ok(&[
        "align",
        "--stats",
        &stats,
        "--out",
        &plan_path,
        "--components",
        "residual",
        "--residual-mode",
        "separate",
    ]);
    let prefix = f.path("sep");
    let r = f.run(&["barrier", "--a", &a, "--b", &b, "--plan", &plan_path, "--out", &prefix]);
    assert_eq!(r.code, 2);
    f.ok(&["barrier", "--a", &a, "--b", &b, "--plan", &plan_path, "--out", &prefix, "--allow-invalid"]);
    assert_eq!(read_json(&format!("{prefix}.json"))["metadata"]["plan"]["valid"], false);
}

#[test]
fn merge_endpoints_are_exact() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let one = f.path("one.pwc");
    let zero = f.path("zero.pwc");
    f.ok(&["merge", "--a", &a, "--b", &b, "--lambda", "1", "--out", &one]);
    f.ok(&["merge", "--a", &a, "--b", &b, "--lambda", "0", "--out", &zero]);
    assert_eq!(digest(&one), digest(&a));
    assert_eq!(digest(&zero), digest(&b));
    let r = f.run(&["merge", "--a", &a, "--b", &b, "--lambda", "1.5", "--out", &one]);
    assert_eq!(r.code, 2);
}

#[test]
fn ablate_data_csv() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let out = f.path("ablate.csv");
    f.ok(&["ablate-data", "--a", &a, "--b", &b, "--sizes", "300", "--out", &out]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# metadata {"));
    assert_eq!(lines[1], "size,tokens,barrier");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("300,300,"));

    let again = f.path("ablate2.csv");
    f.ok(&["ablate-data", "--a", &a, "--b", &b, "--sizes", "300", "--out", &again]);
    let csv2 = std::fs::read_to_string(&again).unwrap();
    assert_eq!(csv.lines().skip(1).collect::<Vec<_>>(), csv2.lines().skip(1).collect::<Vec<_>>());

    let r = f.run(&["ablate-data", "--a", &a, "--b", &b, "--sizes", "0,100", "--out", &out]);
    assert_eq!(r.code, 2);
}

fn corr_rows(csv: &str) -> Vec<(String, f64, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].to_string(), f[3].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn corr_report_rows() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let stats = f.capture(&a, &b, "s.pws", &[]);
    let plan_path = f.path("plan.json");
    f.ok(&[
        "align",
        "--stats",
        &stats,
        "--out",
        &plan_path,
        "--components",
        "ff,mha,residual",
        "--residual-mode",
        "all",
    ]);
    let csv = f.ok(&["corr-report", "--stats", &stats, "--plan", &plan_path]);
    assert!(csv.starts_with("component,layer,point,before,after\n"));
    let rows = corr_rows(&csv);
    assert_eq!(rows.len(), 2 + 2 + 1);
    for (p, before, after) in &rows {
        assert!(after >= before, "{p}: {before} -> {after}");
    }

    let self_stats = f.capture(&a, &a, "self.pws", &[]);
    let self_plan = f.path("self.json");
    f.ok(&["align", "--stats", &self_stats, "--out", &self_plan, "--components", "ff,mha"]);
    let out = f.path("self.csv");
    f.ok(&["corr-report", "--stats", &self_stats, "--plan", &self_plan, "--out", &out]);
    for (p, before, after) in corr_rows(&std::fs::read_to_string(&out).unwrap()) {
        assert!((before - 1.0).abs() < 1e-3, "{p}: {before}");
        assert_eq!(before, after);
    }
}

#[test]
fn classification_barrier() {
    let f = Fixture::new();
    let (a, b) = (f.train(1), f.train(2));
    let (ta, tb) = (f.path("ta.pwc"), f.path("tb.pwc"));
    let out = f.ok(&["finetune", "--model", &a, "--seed", "5", "--out", &ta]);
    assert!(out.contains("eval_accuracy"));
    f.ok(&["finetune", "--model", &b, "--seed", "5", "--out", &tb]);
    let prefix = f.path("cls");
    f.ok(&["barrier", "--a", &ta, "--b", &tb, "--out", &prefix, "--loss", "classification"]);
    let report = BarrierReport::from_json(&std::fs::read_to_string(format!("{prefix}.json")).unwrap()).unwrap();
    assert_eq!(report.loss_kind.as_str(), "classification");
    let r = f.run(&["barrier", "--a", &a, "--b", &b, "--out", &prefix, "--loss", "classification"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn pairs_pipeline_is_deterministic() {
    let f = Fixture::new();
    let out_dir = f.path("pairs");
    let first = f.ok(&["pairs", "--out-dir", &out_dir, "--seeds", "1,2,3"]);
    let summary = std::fs::read_to_string(format!("{out_dir}/summary.csv")).unwrap();
    assert_eq!(first, summary);
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("vanilla,3,"));
    let pairs_csv = std::fs::read_to_string(format!("{out_dir}/pairs.csv")).unwrap();
    assert_eq!(pairs_csv.lines().count(), 1 + 3 * 2);
    let report = format!("{out_dir}/pairs/1-3/aligned.json");
    let before = digest(&report);

    // A fresh run (models retrained) reproduces the reports byte for byte.
    std::fs::remove_dir_all(&out_dir).unwrap();
    f.ok(&["pairs", "--out-dir", &out_dir, "--seeds", "1,2,3"]);
    assert_eq!(digest(&report), before);
    assert_eq!(std::fs::read_to_string(format!("{out_dir}/summary.csv")).unwrap(), summary);

    let r = f.run(&["pairs", "--out-dir", &out_dir, "--seeds", "1"]);
    assert_eq!(r.code, 2);
}

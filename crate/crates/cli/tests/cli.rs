use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l2r::instances::InstanceFile;
use l2r::{Instance, Solution};

fn l2r() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l2r"))
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// A tiny trained checkpoint plus one instance file of the given kind.
fn setup(dir: &Path, kind: &str, n: usize) -> (PathBuf, PathBuf) {
    let cfg = dir.join(format!("{kind}.toml"));
    std::fs::write(
        &cfg,
        format!(
            "kind = \"{kind}\"\nn = 10\nepochs = 1\nbatches_per_epoch = 2\nbatch_size = 4\nk = 4\n\
             eval_pool_size = 8\nval_size = 4\nd = 8\nd_ff = 16\nlayers = 1\n"
        ),
    )
    .unwrap();
    let ckpt = dir.join(format!("{kind}.l2r"));
    ok(l2r().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&ckpt).output().unwrap());
    let inst_dir = dir.join(format!("{kind}_inst"));
    ok(l2r().args(["generate", "--kind", kind, "--n", &n.to_string(), "--seed", "2", "--out"]).arg(&inst_dir).output().unwrap());
    (ckpt, inst_dir.join(format!("{kind}{n}_0.json")))
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(l2r().output().unwrap().status.code(), Some(1));
    assert_eq!(l2r().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(l2r().args(["solve", "--bogus"]).output().unwrap().status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    let out = l2r().args(["generate", "--kind", "tsp", "--n", "5", "--pattern", "spiral", "--out"]).arg(d.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spiral"));
    let help = l2r().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("evaluate"));
}

#[test]
fn runtime_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = l2r()
        .args(["solve", "--instance", "/nonexistent.json", "--checkpoint", "/nonexistent.l2r", "--out"])
        .arg(d.path().join("s.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let bad = d.path().join("bad.l2r");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(l2r().args(["inspect", "--checkpoint"]).arg(&bad).output().unwrap().status.code(), Some(2));
}

#[test]
fn generate_writes_instances_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(l2r().args(["generate", "--kind", "cvrp", "--n", "15", "--count", "3", "--seed", "4", "--out"]).arg(d.path()).output().unwrap());
    for i in 0..3 {
        let f: InstanceFile = json(&d.path().join(format!("cvrp15_{i}.json")));
        let inst = Instance::try_from(f).unwrap();
        assert_eq!(inst.customers(), 15);
    }
    let m: serde_json::Value = json(&d.path().join("manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    ok(l2r().args(["generate", "--kind", "tsp", "--n", "12", "--format", "benchmark", "--pattern", "cluster", "--out"]).arg(d.path().join("b")).output().unwrap());
    assert!(d.path().join("b/tsp12_0.tsp").exists());
}

#[test]
fn solve_improve_inspect_round_trip() {
    let d = tempfile::tempdir().unwrap();
    for (kind, n) in [("tsp", 30), ("cvrp", 25)] {
        let (ckpt, inst_path) = setup(d.path(), kind, n);
        let inst = Instance::try_from(json::<InstanceFile>(&inst_path)).unwrap();
        let sol_path = d.path().join(format!("{kind}_sol.json"));
        let svg = d.path().join(format!("{kind}.svg"));
        ok(l2r()
            .args(["solve", "--mode", "greedy", "--svg-step", "3", "--instance"])
            .arg(&inst_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&sol_path)
            .arg("--svg")
            .arg(&svg)
            .output()
            .unwrap());
        let sol: Solution = json(&sol_path);
        sol.validate(&inst).unwrap();
        assert!(sol.wall_ms.is_none());
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
        assert!(d.path().join(format!("{kind}_sol.manifest.json")).exists());

        // Zero PRC iterations must return the input objective.
        let same = d.path().join(format!("{kind}_same.json"));
        ok(l2r()
            .args(["improve", "--prc-iters", "0", "--instance"])
            .arg(&inst_path)
            .args(["--solution"])
            .arg(&sol_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&same)
            .output()
            .unwrap());
        let s0: Solution = json(&same);
        assert_eq!(s0.objective, sol.objective);

        let better = d.path().join(format!("{kind}_better.json"));
        ok(l2r()
            .args(["improve", "--prc-iters", "20", "--prc-max-destroy", "10", "--timings", "--instance"])
            .arg(&inst_path)
            .args(["--solution"])
            .arg(&sol_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(&better)
            .output()
            .unwrap());
        let s1: Solution = json(&better);
        s1.validate(&inst).unwrap();
        assert!(s1.objective <= sol.objective);
        assert!(s1.wall_ms.is_some());

        let out = ok(l2r().args(["inspect", "--checkpoint"]).arg(&ckpt).output().unwrap());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["header"]["model"]["kind"], kind);
        assert_eq!(v["header"]["k"], 4);
    }
}

#[test]
fn wrong_kind_checkpoint_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, _) = setup(d.path(), "tsp", 12);
    ok(l2r().args(["generate", "--kind", "cvrp", "--n", "12", "--out"]).arg(d.path().join("c")).output().unwrap());
    let out = l2r()
        .args(["solve", "--instance"])
        .arg(d.path().join("c/cvrp12_0.json"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(d.path().join("x.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("x.json").exists());
}

#[test]
fn evaluate_is_reproducible_and_complete() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, _) = setup(d.path(), "tsp", 12);
    let run = |name: &str| {
        let out = d.path().join(name);
        ok(l2r()
            .args(["evaluate", "--oracle", "held-karp", "--n", "9", "--count", "50", "--seed", "1", "--pruned-k", "3,8", "--checkpoint"])
            .arg(&ckpt)
            .arg("--out")
            .arg(&out)
            .env("L2R_WORKERS", "1")
            .output()
            .unwrap());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["report.csv", "report.json", "pruned.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows: Vec<l2r::evaluation::SolveReport> = json(&a.join("report.json"));
    assert_eq!(rows.len(), 50 * 4);
    for r in &rows {
        assert!(r.gap_pct.unwrap() >= -1e-9, "{r:?}");
        if r.method == "held-karp" {
            assert_eq!(r.gap_pct, Some(0.0));
        }
        if let Some(ratio) = r.optimality_ratio {
            assert!((0.0..=100.0).contains(&ratio));
        }
    }
    let m: serde_json::Value = json(&a.join("manifest.json"));
    assert_eq!(m["workers"], 1);
    let csv = std::fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(csv.starts_with("instance,method,k,objective"));
}

#[test]
fn train_flags_override_config_and_log_every_epoch() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = d.path().join("m.l2r");
    ok(l2r()
        .args(["train", "--n", "8", "--epochs", "2", "--batches-per-epoch", "1", "--batch-size", "4", "--k", "3", "--clip-norm", "0.5", "--out"])
        .arg(&ckpt)
        .output()
        .unwrap());
    let log = std::fs::read_to_string(d.path().join("m.metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["epoch"], 2);
    let m: serde_json::Value = json(&d.path().join("m.manifest.json"));
    assert_eq!(m["config"]["resolved"]["k"], 3);
    assert_eq!(m["config"]["resolved"]["clip_norm"], 0.5);
    // Invalid settings are usage errors.
    let out = l2r().args(["train", "--gamma", "1.5", "--out"]).arg(d.path().join("x.l2r")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn graph_cache_is_not_reused_for_another_instance() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, _) = setup(d.path(), "tsp", 40);
    ok(l2r().args(["generate", "--kind", "tsp", "--n", "40", "--count", "2", "--seed", "9", "--out"]).arg(d.path().join("g")).output().unwrap());
    let cache = d.path().join("graph.bin");
    let solve = |inst: &str, out: &str, cached: bool| {
        let mut c = l2r();
        c.args(["solve", "--gamma", "0.3", "--instance"]).arg(d.path().join("g").join(inst)).arg("--checkpoint").arg(&ckpt).arg("--out").arg(d.path().join(out));
        if cached {
            c.arg("--graph-cache").arg(&cache);
        }
        ok(c.output().unwrap());
        std::fs::read(d.path().join(out)).unwrap()
    };
    let a = solve("tsp40_0.json", "a.json", true);
    assert!(cache.exists());
    assert_eq!(a, solve("tsp40_0.json", "a2.json", true));
    assert_eq!(solve("tsp40_1.json", "b.json", true), solve("tsp40_1.json", "b_fresh.json", false));
}

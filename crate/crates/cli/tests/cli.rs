use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use luq_core::calib::CalibrationSet;
use luq_core::container::Container;
use luq_core::entropy::{EntropyProfile, StabilityCurve};
use luq_core::eval::{EvalReport, TradeoffRow};
use luq_core::net::LayerStack;
use luq_core::select::QuantPlan;

fn luq(args: &[&str]) -> Output {
    luq_env(args, None)
}

fn luq_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_luq"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("LUQ_SEED");
    if let Some(s) = seed {
        cmd.env("LUQ_SEED", s);
    }
    cmd.output().expect("spawn luq")
}

#[track_caller]
fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic workload in `dir`: model, pool, calib and eval containers.
fn synth(dir: &Path, seed: u64) {
    let seed = seed.to_string();
    ok(luq(&[
        "synth", "--ranks", "2,2,16,16", "--hidden-dim", "16", "--vocab-size", "16", "--seq-len", "16",
        "--pool-seqs", "16", "--calib-seqs", "16", "--eval-seqs", "16", "--seed", &seed, "--out-dir", s(dir),
    ]));
}

fn entropy(dir: &Path) -> PathBuf {
    let out = dir.join("entropy.json");
    ok(luq(&["entropy", "--model", s(&dir.join("model.luqc")), "--calib", s(&dir.join("calib.luqc")), "--k", "20", "--out", s(&out)]));
    out
}

fn threshold_plan(dir: &Path, tau: f64, search: &str, name: &str) -> PathBuf {
    let out = dir.join(name);
    let tau = tau.to_string();
    ok(luq(&[
        "plan", "--model", s(&dir.join("model.luqc")), "--entropy", s(&dir.join("entropy.json")),
        "--calib", s(&dir.join("calib.luqc")), "--eval", s(&dir.join("eval.luqc")),
        "--mode", "threshold", "--tau", &tau, "--search", search, "--out", s(&out),
    ]));
    out
}

/// synth -> entropy -> plan -> quantize -> eval.
fn chain(dir: &Path) {
    synth(dir, 3);
    entropy(dir);
    threshold_plan(dir, 0.3, "greedy", "plan.json");
    ok(luq(&[
        "quantize", "--model", s(&dir.join("model.luqc")), "--calib", s(&dir.join("calib.luqc")),
        "--plan", s(&dir.join("plan.json")), "--out", s(&dir.join("quantized.luqc")),
    ]));
    ok(luq(&["eval", "--model", s(&dir.join("quantized.luqc")), "--eval", s(&dir.join("eval.luqc")), "--out", s(&dir.join("report.json"))]));
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn plan_quantize_eval_chain_produces_readable_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    chain(d);

    let model = LayerStack::from_container(&Container::read_from(d.join("model.luqc")).unwrap()).unwrap();
    CalibrationSet::from_container(&Container::read_from(d.join("calib.luqc")).unwrap()).unwrap();
    let profile = EntropyProfile::from_report(&json(&d.join("entropy.json"))).unwrap();
    assert_eq!(profile.num_layers(), 4);
    let plan = QuantPlan::from_json(&json(&d.join("plan.json"))).unwrap();
    let q = LayerStack::from_container(&Container::read_from(d.join("quantized.luqc")).unwrap()).unwrap();
    assert_eq!(q.tags(), plan.tags());
    assert_eq!(q.config, model.config);
    let report: EvalReport = serde_json::from_value(json(&d.join("report.json"))).unwrap();
    assert_eq!(report.plan.as_ref().and_then(|p| p["k"].as_u64()), Some(plan.k as u64));

    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,avg_bits,score,metric,seed");
    assert!(lines[1].starts_with(&format!("{},", plan.k)));

    for run in ["synth.run.json", "entropy.run.json", "plan.run.json", "quantized.run.json", "report.run.json"] {
        assert!(d.join(run).exists(), "{run}");
    }
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    chain(a.path());
    chain(b.path());
    for f in ["model.luqc", "calib.luqc", "eval.luqc", "entropy.json", "plan.json", "quantized.luqc", "report.json", "report.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn replaying_run_json_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    chain(d);
    for (art, run) in [("plan.json", "plan.run.json"), ("quantized.luqc", "quantized.run.json"), ("report.json", "report.run.json")] {
        let before = std::fs::read(d.join(art)).unwrap();
        std::fs::remove_file(d.join(art)).unwrap();
        ok(luq(&["replay", s(&d.join(run))]));
        assert_eq!(std::fs::read(d.join(art)).unwrap(), before, "{art}");
    }
}

#[test]
fn binary_and_greedy_search_write_identical_plans() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 5);
    entropy(d);
    let curve = d.join("curve.csv");
    ok(luq(&[
        "curve", "--model", s(&d.join("model.luqc")), "--calib", s(&d.join("calib.luqc")),
        "--entropy", s(&d.join("entropy.json")), "--eval", s(&d.join("eval.luqc")), "--out", s(&curve),
    ]));
    let rows: Vec<TradeoffRow> = serde_json::from_value(json(&d.join("curve.json"))).unwrap();
    let perf: Vec<f64> = rows.iter().map(|r| r.score).collect();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);

    // Thresholds at which `perf(k) >= tau` holds exactly on a prefix of k,
    // so the search problem is monotone.
    let taus: Vec<f64> = perf
        .iter()
        .copied()
        .filter(|&t| {
            let pass: Vec<bool> = perf.iter().map(|&p| p >= t).collect();
            pass[0] && pass.windows(2).all(|w| w[0] || !w[1])
        })
        .chain([f64::MIN, 2.0])
        .collect();
    assert!(taus.len() > 2, "no monotone threshold on {perf:?}");
    for tau in taus {
        let g = threshold_plan(d, tau, "greedy", "greedy.json");
        let b = threshold_plan(d, tau, "binary", "binary.json");
        assert_eq!(std::fs::read(g).unwrap(), std::fs::read(b).unwrap(), "tau {tau} on {perf:?}");
    }
}

#[test]
fn infeasible_budget_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 1);
    entropy(d);
    let out = luq(&[
        "plan", "--model", s(&d.join("model.luqc")), "--entropy", s(&d.join("entropy.json")),
        "--mode", "budget", "--budget-bytes", "100", "--out", s(&d.join("plan.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget infeasible"));
    assert!(!d.join("plan.json").exists());

    ok(luq(&[
        "plan", "--model", s(&d.join("model.luqc")), "--entropy", s(&d.join("entropy.json")),
        "--mode", "budget", "--budget-bytes", "1e9", "--out", s(&d.join("plan.json")),
    ]));
    assert_eq!(json(&d.join("plan.json"))["k"], 0);
}

#[test]
fn validation_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 2);
    let missing = d.join("missing.luqc");
    let out = luq(&["entropy", "--model", s(&missing), "--calib", s(&d.join("calib.luqc")), "--out", s(&d.join("e.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let out = luq(&[
        "stability", "--model", s(&d.join("model.luqc")), "--calib", s(&d.join("calib.luqc")),
        "--k-grid", "10,20", "--out", s(&d.join("st.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // threshold mode without tau
    let out = luq(&["plan", "--model", s(&d.join("model.luqc")), "--entropy", s(&d.join("e.json")), "--out", s(&d.join("p.json"))]);
    assert_eq!(out.status.code(), Some(2));

    // usage error from the parser
    assert_eq!(luq(&["entropy", "--bogus"]).status.code(), Some(2));
}

#[test]
fn stability_knee_becomes_the_entropy_default() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 4);
    let (model, calib) = (d.join("model.luqc"), d.join("calib.luqc"));
    ok(luq(&["stability", "--model", s(&model), "--calib", s(&calib), "--out", s(&d.join("stability.json"))]));
    let curve: StabilityCurve = serde_json::from_value(json(&d.join("stability.json"))).unwrap();
    assert_eq!(curve.grid, (10..=200).step_by(10).collect::<Vec<_>>());
    assert_eq!(curve.distances.len(), 19);

    ok(luq(&["entropy", "--model", s(&model), "--calib", s(&calib), "--stability", s(&d.join("stability.json")), "--out", s(&d.join("entropy.json"))]));
    assert_eq!(json(&d.join("entropy.json"))["K"], curve.selected_k);
    assert_eq!(json(&d.join("entropy.run.json"))["command"]["k"], curve.selected_k);

    ok(luq(&["entropy", "--model", s(&model), "--calib", s(&calib), "--out", s(&d.join("e100.json"))]));
    assert_eq!(json(&d.join("e100.json"))["K"], 100);
}

#[test]
fn luq_seed_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 6);
    let (model, calib) = (d.join("model.luqc"), d.join("calib.luqc"));
    let args = |out: &Path| {
        vec!["entropy".to_string(), "--model".into(), s(&model).into(), "--calib".into(), s(&calib).into(), "--k".into(), "20".into(), "--seed".into(), "1".into(), "--out".into(), s(out).into()]
    };
    let a = args(&d.join("a.json"));
    ok(luq_env(&a.iter().map(String::as_str).collect::<Vec<_>>(), Some("9")));
    assert_eq!(json(&d.join("a.json"))["seed"], 9);
    assert_eq!(json(&d.join("a.run.json"))["command"]["seed"], 9);

    let bad = args(&d.join("b.json"));
    let out = luq_env(&bad.iter().map(String::as_str).collect::<Vec<_>>(), Some("nine"));
    assert_eq!(out.status.code(), Some(2));
}

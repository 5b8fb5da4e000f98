use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rest"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rest(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy() -> String {
    root().join("configs/toy.toml").display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    let data = root().join("data/toy");
    fs::write(&path, format!("data_dir = {:?}\n{body}", data.display().to_string())).unwrap();
    path.display().to_string()
}

#[test]
fn synth_gen_is_reproducible_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = root().join("configs/toy-synth.toml").display().to_string();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["synth-gen", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    }
    for file in ["events.jsonl", "prices.csv", "relations.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(root().join("data/toy").join(file)).unwrap(), "{file}");
    }
    let data = rest_core::market_data::load_dataset(&a).unwrap();
    assert_eq!((data.num_stocks(), data.num_days()), (8, 60));
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let start = Instant::now();
    ok(&["train", "--config", &toy(), "--variant", "rest", "--hops", "2", "--out", out]);
    assert!(start.elapsed() < Duration::from_secs(300));
    let report = json(&tmp.path().join("train_report.json"));
    assert_eq!(report["command"], "train");
    assert!(report["result"]["parameters"].as_object().unwrap().keys().any(|k| k.ends_with(".scorer")));

    ok(&["evaluate", "--config", &toy(), "--out", out]);
    let preds = fs::read_to_string(tmp.path().join("predictions.jsonl")).unwrap();
    let lines: Vec<Value> = preds.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l["prediction"].is_f64() && l["stock"].is_string()));
    let metrics = json(&tmp.path().join("metrics.json"));
    assert_eq!(metrics["result"]["raw"]["count"].as_u64().unwrap() as usize, lines.len());

    // Eight stocks, so k = 20 holds the whole universe.
    ok(&["backtest", "--config", &toy(), "--out", out, "--topk", "2,20"]);
    let bt = json(&tmp.path().join("backtest.json"));
    let results = bt["result"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[1]["short_days"].as_array().unwrap().len() > 0);
    let csv = fs::read_to_string(tmp.path().join("backtest_values.csv")).unwrap();
    assert!(csv.starts_with("date,k,value\n"));

    // Trading on the written predictions matches the checkpoint path.
    let other = tmp.path().join("from-preds");
    ok(&[
        "backtest",
        "--config",
        &toy(),
        "--out",
        other.to_str().unwrap(),
        "--topk",
        "2,20",
        "--predictions",
        tmp.path().join("predictions.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(json(&other.join("backtest.json"))["result"], bt["result"]);
}

#[test]
fn event_driven_checkpoint_has_no_propagation() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["train", "--config", &toy(), "--variant", "event-driven", "--out", tmp.path().to_str().unwrap()]);
    let report = json(&tmp.path().join("train_report.json"));
    let names: Vec<&String> = report["result"]["parameters"].as_object().unwrap().keys().collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.starts_with("propagation")), "{names:?}");
}

#[test]
fn same_seed_reports_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut reports = Vec::new();
    for _ in 0..2 {
        ok(&["train", "--config", &toy(), "--seed", "3", "--out", out]);
        ok(&["evaluate", "--config", &toy(), "--out", out, "--seed", "3"]);
        let files = ["train_report.json", "metrics.json", "predictions.jsonl", "checkpoint.bin"];
        reports.push(files.map(|f| fs::read(tmp.path().join(f)).unwrap()));
    }
    assert!(reports[0] == reports[1]);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["train", "--config", &toy(), "--out", out]);
    let res = rest(&["evaluate", "--config", &toy(), "--out", out, "--hops", "3"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("different configuration"));
}

#[test]
fn gradcheck_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = root().join("configs/gradcheck.toml").display().to_string();
    ok(&["gradcheck", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    let report = json(&tmp.path().join("gradcheck.json"));
    assert_eq!(report["result"]["passed"], true);
    assert!(report["result"]["entries"].as_array().unwrap().len() >= 50);
}

#[test]
fn ablation_writes_every_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[model]\nembed_dim = 4\nheads = 1\nhidden = 4\n[sgd]\nlearning_rate = 0.03\nepochs = 2\n\
         [ablation]\nseeds = [0]\nvariants = [\"event-driven\", \"rest\"]\nhops = [1, 2]\n",
    );
    ok(&["ablate", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    let table = json(&tmp.path().join("ablation.json"));
    let count = |k: &str| table["result"][k].as_array().unwrap().len();
    assert_eq!((count("variants"), count("hops"), count("context")), (2, 2, 3));
    let text = fs::read_to_string(tmp.path().join("ablation.txt")).unwrap();
    assert!(text.contains("[variants]") && text.contains("rest l=2"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rest(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rest(&["train", "--config", "missing.toml"]).status.code(), Some(1));
    assert_eq!(rest(&["train"]).status.code(), Some(1));
    assert_eq!(rest(&["train", "--config", &toy(), "--variant", "nope"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nhidden = 0\n[backtest]\nk = []\n");
    let res = rest(&["train", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("model") && err.contains("backtest"), "{err}");
    assert_eq!(rest(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[model]\nembed_dim = 4\nheads = 1\nhidden = 4\n[sgd]\nlearning_rate = 1e12\nepochs = 3\n",
    );
    let res = rest(&["train", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

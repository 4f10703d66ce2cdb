use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
datagen.items = 600
datagen.categories = 4
datagen.queries = 40
datagen.users = 80
datagen.days = 5
train.epochs = 1
train.dim = 8
index.topk = 20
";

fn gclmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gclmo"))
        .args(args)
        .env_remove("GCLMO_TRAIN_EPOCHS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.conf");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn datagen_stage_alone_writes_only_data() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&gclmo(&["pipeline", "--config", &conf, "--out-dir", out.to_str().unwrap(), "--stages", "datagen"]));
    assert_eq!(names(&out), ["catalog.json", "eval_logs.jsonl", "manifest.json", "train_logs.jsonl"]);
}

#[test]
fn pipeline_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_config(tmp.path());
    let runs: Vec<_> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for dir in &runs {
        ok(&gclmo(&["pipeline", "--config", &conf, "--out-dir", dir.to_str().unwrap()]));
    }
    for file in ["metrics.json", "model.ckpt", "index.tsv"] {
        assert_eq!(fs::read(runs[0].join(file)).unwrap(), fs::read(runs[1].join(file)).unwrap(), "{file}");
    }
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_config(tmp.path());
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    ok(&gclmo(&[
        "datagen", "--config", &conf, "--seed", "3", "--out", &p("train.jsonl"), "--eval-out", &p("eval.jsonl"),
        "--catalog-out", &p("catalog.json"),
    ]));
    ok(&gclmo(&["build-graph", "--config", &conf, "--logs", &p("train.jsonl"), "--out", &p("graph.tsv")]));
    ok(&gclmo(&[
        "train", "--config", &conf, "--logs", &p("train.jsonl"), "--graph", &p("graph.tsv"), "--catalog",
        &p("catalog.json"), "--out", &p("model.ckpt"),
    ]));
    let metrics = fs::read_to_string(p("model.ckpt.metrics.jsonl")).unwrap();
    let epoch: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(epoch["total_loss"].as_f64().unwrap() > 0.0);
    ok(&gclmo(&[
        "build-index", "--config", &conf, "--checkpoint", &p("model.ckpt"), "--graph", &p("graph.tsv"), "--catalog",
        &p("catalog.json"), "--out", &p("index.tsv"),
    ]));
    ok(&gclmo(&[
        "evaluate", "--config", &conf, "--index", &p("index.tsv"), "--eval-logs", &p("eval.jsonl"), "--catalog",
        &p("catalog.json"), "--exposure-stats", &p("exposure.json"), "--train-logs", &p("train.jsonl"),
        "--baseline-out", &p("baseline.json"), "--out", &p("metrics.json"),
    ]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("metrics.json")).unwrap()).unwrap();
    assert!(m["recall_at_k"].as_f64().unwrap() > 0.0);
    assert!(Path::new(&p("exposure.json")).exists());
    assert!(Path::new(&p("baseline.json")).exists());

    // A history from one eval record's triggers.
    let record: serde_json::Value = fs::read_to_string(p("eval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| !r["trigger_items"].as_array().unwrap().is_empty())
        .unwrap();
    let category = record["category_id"].as_u64().unwrap().to_string();
    let history: String = record["trigger_items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| format!("{{\"item_id\": {t}, \"day\": 3}}\n"))
        .collect();
    fs::write(p("history.jsonl"), history).unwrap();
    let out = gclmo(&[
        "retrieve", "--index", &p("index.tsv"), "--history", &p("history.jsonl"), "--catalog", &p("catalog.json"),
        "--query-category", &category, "--size", "5",
    ]);
    ok(&out);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let items = result["items"].as_array().unwrap();
    assert!(!items.is_empty() && items.len() <= 5, "{result}");
}

#[test]
fn corrupted_logs_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&gclmo(&["pipeline", "--config", &conf, "--out-dir", data.to_str().unwrap(), "--stages", "datagen"]));
    let logs = fs::read_to_string(data.join("train_logs.jsonl")).unwrap();
    let mut lines: Vec<&str> = logs.lines().collect();
    lines[2] = "{\"user_id\": 1, \"oops\"";
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let out = gclmo(&["build-graph", "--logs", bad.to_str().unwrap(), "--out", tmp.path().join("g.tsv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:3:"), "{err}");
    assert!(!tmp.path().join("g.tsv").exists());
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gclmo(&[
        "pipeline", "--set", "train.learning_rate=0.1", "--out-dir", tmp.path().to_str().unwrap(), "--stages", "datagen",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.learning_rate") && err.contains("train.lr"), "{err}");

    let out = gclmo(&["pipeline", "--set", "train.tau=-1", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.jsonl");
    let out = gclmo(&["build-graph", "--logs", missing.to_str().unwrap(), "--out", tmp.path().join("g").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
}

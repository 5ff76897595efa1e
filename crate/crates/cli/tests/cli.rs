use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sqz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqz"))
        .args(args)
        .output()
        .expect("failed to spawn sqz")
}

fn ok(args: &[&str]) -> Output {
    let out = sqz(args);
    assert!(
        out.status.success(),
        "sqz {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read_json(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timestamp(path: &str) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

const SMALL_EVAL: &str = "seeds: [3]
corpus: {num_users: 8, history_length: 80, semantic_dim: 8, ranking_dim: 4}
codebooks: {codebook_sizes: [16, 4], epochs: 4}
voting: {budget: [8, 2]}
";

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = p(d, "data");
    ok(&["generate", "--out-dir", &out, "--users", "6", "--history-length", "150", "--seed", "4"]);
    let corpus = p(d, "data/corpus.sqz");
    let events = p(d, "data/events.csv");
    assert!(Path::new(&corpus).exists());
    assert!(Path::new(&p(d, "data/ground_truth.csv")).exists());

    let cb = p(d, "cb.sqz");
    let train = ok(&[
        "train-codebooks", "--input", &corpus, "--levels", "2", "--codebook-size", "16", "--epochs", "4", "--out", &cb,
    ]);
    let loss: Value = serde_json::from_slice(&train.stdout).unwrap();
    assert!(loss["total"].as_f64().unwrap() > 0.0, "train output: {loss}");

    let sids = p(d, "sids.csv");
    ok(&["tokenize", "--corpus", &corpus, "--codebooks", &cb, "--histories", &events, "--out", &sids]);
    let header = std::fs::read_to_string(&sids).unwrap();
    assert!(header.starts_with("user_id,item_id,timestamp,sid"));

    let agents = p(d, "agents.json");
    ok(&["vote", "--sids", &sids, "--codebooks", &cb, "--budget", "8,2", "--out", &agents]);
    let sets = read_json(&agents);
    assert_eq!(sets.as_array().unwrap().len(), 6);

    let compressed = p(d, "c.sqz");
    ok(&[
        "compress", "--agents", &agents, "--history", &events, "--corpus", &corpus, "--sids", &sids, "--mode", "hard",
        "--decay-half-life", "--out", &compressed,
    ]);
    let meta = read_json(&format!("{compressed}.meta.json"));
    assert_eq!(meta["extra"]["mode"], "hard");
    assert_eq!(meta["extra"]["users"].as_array().unwrap().len(), 6);

    let bench = p(d, "bench.json");
    ok(&["bench-baselines", "--corpus", &corpus, "--histories", &events, "--groups", "10", "--out", &bench]);
    let bench = read_json(&bench);
    for m in ["patch", "kmeans", "lsh"] {
        assert!(bench.to_string().contains(m), "missing {m} in {bench}");
    }

    let replay = p(d, "replay.csv");
    ok(&["generate-replay", "--corpus", &corpus, "--histories", &events, "--requests", "40", "--candidates", "10", "--out", &replay]);
    let serving = p(d, "serving.json");
    ok(&[
        "simulate-serving", "--replay", &replay, "--corpus", &corpus, "--codebooks", &cb, "--histories", &events, "--out",
        &serving,
    ]);
    assert!(read_json(&serving).to_string().contains("hit_rate"));
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "eval.yaml");
    std::fs::write(&cfg, SMALL_EVAL).unwrap();
    ok(&["eval", "--config", &cfg, "--out", &p(d, "a")]);
    ok(&["eval", "--config", &cfg, "--out", &p(d, "b")]);
    assert_eq!(without_timestamp(&p(d, "a/report.json")), without_timestamp(&p(d, "b/report.json")));
    assert_eq!(
        std::fs::read_to_string(p(d, "a/report.csv")).unwrap(),
        std::fs::read_to_string(p(d, "b/report.csv")).unwrap()
    );
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "bad.yaml");
    std::fs::write(&cfg, "voting: {budget: [8]}\n").unwrap();
    assert_eq!(sqz(&["eval", "--config", &cfg, "--out", &p(d, "o")]).status.code(), Some(2));
    assert_eq!(
        sqz(&["vote", "--sids", "x", "--codebooks", "y", "--budget", "x", "--out", "z"]).status.code(),
        Some(2)
    );
    assert_eq!(sqz(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = sqz(&[
        "train-codebooks", "--input", &p(d, "missing.sqz"), "--epochs", "1", "--out", &p(d, "cb.sqz"),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn version_prints() {
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("sqz "));
}

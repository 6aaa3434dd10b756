use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nevae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nevae"))
        .args(args)
        .env("NEVAE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nevae(args);
    assert!(
        out.status.success(),
        "nevae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn corpus(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("corpus_{count}_{seed}.jsonl"));
    ok(&[
        "generate-corpus",
        "--kind",
        "molecules",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&path),
    ]);
    path
}

fn trained(dir: &Path, corpus: &Path, iters: usize, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "train",
        "--corpus",
        p(corpus),
        "--seed",
        "7",
        "--iters",
        &iters.to_string(),
        "--mask",
        "valence",
        "--out-dir",
        p(&out),
    ]);
    out
}

fn log_values(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("elbo_log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn train_writes_one_row_per_iteration_and_repeats_under_a_seed() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path(), 20, 1);
    let a = trained(tmp.path(), &c, 50, "a");
    let b = trained(tmp.path(), &c, 50, "b");
    let rows = log_values(&a);
    assert_eq!(rows[0], "iteration,mean_elbo");
    assert_eq!(rows.len(), 51);
    assert_eq!(rows, log_values(&b));
    assert!(a.join("model.ckpt").exists());
    let summary = read_json(&a.join("train_summary.json"));
    assert_eq!(summary["metadata"]["scale"]["iterations"], 50);
    assert_eq!(summary["metadata"]["seed"], 7);
}

#[test]
fn missing_corpus_is_an_input_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent.jsonl");
    let out = nevae(&[
        "train",
        "--corpus",
        p(&missing),
        "--seed",
        "1",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn malformed_corpus_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"atoms\":[\"C\"],\"bonds\":[]}\nnot json\n").unwrap();
    let out = nevae(&["train", "--corpus", p(&bad), "--seed", "1", "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn bad_hyperparameters_are_input_errors() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path(), 5, 2);
    let out = nevae(&[
        "train",
        "--corpus",
        p(&c),
        "--seed",
        "1",
        "--D",
        "2",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = nevae(&[
        "train",
        "--corpus",
        p(&c),
        "--seed",
        "1",
        "--mask",
        "bogus",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sampling_under_the_valence_mask_is_always_valid() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path(), 30, 3);
    let model = trained(tmp.path(), &c, 40, "m");
    let ck = model.join("model.ckpt");
    let out = tmp.path().join("s");
    ok(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--count",
        "60",
        "--seed",
        "4",
        "--out-dir",
        p(&out),
    ]);
    let metrics = read_json(&out.join("metrics.json"));
    assert_eq!(metrics["metrics"]["validity"], 1.0);
    assert_eq!(metrics["metrics"]["n_samples"], 60);
    assert!(metrics["metadata"]["scale"].is_object());
    assert_eq!(
        fs::read_to_string(out.join("samples.jsonl")).unwrap().lines().count(),
        60
    );

    let post = tmp.path().join("post");
    ok(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--count",
        "10",
        "--mode",
        "posterior:2",
        "--seed",
        "4",
        "--out-dir",
        p(&post),
    ]);
    assert_eq!(read_json(&post.join("metrics.json"))["metrics"]["validity"], 1.0);

    let zero = nevae(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--count",
        "0",
        "--seed",
        "4",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(zero.status.code(), Some(2));
    let bad_mode = nevae(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--count",
        "3",
        "--mode",
        "posterior:x",
        "--seed",
        "4",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn interpolation_and_perturbation_emit_one_graph_per_step() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path(), 30, 5);
    let model = trained(tmp.path(), &c, 20, "m");
    let ck = model.join("model.ckpt");
    let graphs: Vec<usize> = fs::read_to_string(&c)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["atoms"]
                .as_array()
                .unwrap()
                .len()
        })
        .collect();
    let (a, b) = (0..graphs.len())
        .flat_map(|i| (i + 1..graphs.len()).map(move |j| (i, j)))
        .find(|&(i, j)| graphs[i] == graphs[j])
        .expect("two molecules of equal size");
    let out = tmp.path().join("i");
    ok(&[
        "interpolate",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--a",
        &a.to_string(),
        "--b",
        &b.to_string(),
        "--steps",
        "5",
        "--seed",
        "1",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(
        fs::read_to_string(out.join("interpolation.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    assert!(out.join("interpolation_004.dot").exists());
    let weights: Vec<f64> = read_json(&out.join("interpolation.json"))["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["weight_a"].as_f64().unwrap())
        .collect();
    assert_eq!(weights, vec![1.0, 0.75, 0.5, 0.25, 0.0]);

    if let Some(other) = (0..graphs.len()).find(|&j| graphs[j] != graphs[a]) {
        let mismatch = nevae(&[
            "interpolate",
            "--checkpoint",
            p(&ck),
            "--corpus",
            p(&c),
            "--a",
            &a.to_string(),
            "--b",
            &other.to_string(),
            "--seed",
            "1",
            "--out-dir",
            p(&out),
        ]);
        assert_eq!(mismatch.status.code(), Some(2));
    }

    let pert = tmp.path().join("p");
    ok(&[
        "perturb",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&c),
        "--molecule",
        "0",
        "--node",
        "0",
        "--amplitudes",
        "0,1,3",
        "--seed",
        "2",
        "--out-dir",
        p(&pert),
    ]);
    assert_eq!(
        fs::read_to_string(pert.join("perturbation.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn triangle_free_experiment_respects_the_mask() {
    let tmp = TempDir::new().unwrap();
    ok(&[
        "synth",
        "--experiment",
        "triangle_free",
        "--seed",
        "3",
        "--iters",
        "30",
        "--corpus-size",
        "20",
        "--samples",
        "40",
        "--out-dir",
        p(tmp.path()),
    ]);
    let report = read_json(&tmp.path().join("synth_triangle_free.json"));
    assert_eq!(report["result"]["triangle_free_fraction_masked"], 1.0);
    assert_eq!(report["metadata"]["scale"]["samples"], 40);
}

#[test]
fn ranking_experiments_report_correlations() {
    let tmp = TempDir::new().unwrap();
    for exp in ["kronecker", "ba"] {
        ok(&[
            "synth",
            "--experiment",
            exp,
            "--seed",
            "3",
            "--iters",
            "20",
            "--corpus-size",
            "20",
            "--samples",
            "30",
            "--out-dir",
            p(tmp.path()),
        ]);
        let report = read_json(&tmp.path().join(format!("synth_{exp}.json")));
        for model in ["decoder_logprob", "elbo"] {
            let rho = report["result"][model]["spearman"].as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&rho), "{exp} {model}: {rho}");
        }
    }
}

#[test]
fn perm_drift_writes_a_curve_per_source_distribution() {
    let tmp = TempDir::new().unwrap();
    ok(&[
        "synth",
        "--experiment",
        "perm_drift",
        "--seed",
        "3",
        "--iters",
        "20",
        "--corpus-size",
        "15",
        "--out-dir",
        p(tmp.path()),
    ]);
    let csv = fs::read_to_string(tmp.path().join("perm_drift.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 20);
}

#[test]
fn short_optimization_run_writes_its_trace() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path(), 60, 6);
    let model = trained(tmp.path(), &c, 40, "m");
    let out = tmp.path().join("bo");
    let stdout = ok(&[
        "bo",
        "--checkpoint",
        p(&model.join("model.ckpt")),
        "--corpus",
        p(&c),
        "--seed",
        "9",
        "--iters",
        "1",
        "--batch",
        "4",
        "--inducing",
        "20",
        "--out-dir",
        p(&out),
    ]);
    assert!(stdout.contains("RMSE"));
    let trace = read_json(&out.join("bo_trace.json"));
    assert_eq!(trace["records"].as_array().unwrap().len(), 4);
    let summary = read_json(&out.join("bo_summary.json"));
    assert!(summary["test_rmse"].as_f64().unwrap().is_finite());
    assert!(fs::read_to_string(out.join("sorted_scores.csv"))
        .unwrap()
        .starts_with("rank,score,molecule"));
}

#[test]
fn every_corpus_kind_round_trips_through_training_input() {
    let tmp = TempDir::new().unwrap();
    for kind in ["molecules", "triangle-free", "kronecker", "ba"] {
        let path = tmp.path().join(format!("{kind}.jsonl"));
        ok(&[
            "generate-corpus",
            "--kind",
            kind,
            "--count",
            "6",
            "--seed",
            "1",
            "--out",
            p(&path),
        ]);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 6);
    }
}

#[test]
fn invalid_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_nevae"))
        .args([
            "generate-corpus",
            "--kind",
            "ba",
            "--count",
            "1",
            "--seed",
            "1",
            "--out",
            "/dev/null",
        ])
        .env("NEVAE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

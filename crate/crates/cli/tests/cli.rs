use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avt::data::load_idx;
use avt::eval::{evaluate, MetricsReport, Predictor};
use avt::groups::{ClusterTree, GroupPartition};
use avt::network::{mlp, Network};
use serde_json::{json, Value};
use tempfile::TempDir;

fn avt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avt"))
        .args(args)
        .env_remove("AVT_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = avt(args);
    assert!(
        out.status.success(),
        "avt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn paired_blobs(seed: u64, per_class: usize) -> Value {
    json!({
        "n_classes": 4,
        "input_dim": 2,
        "class_centers": [[0.1, 0.1], [0.2, 0.1], [0.8, 0.9], [0.9, 0.9]],
        "noise_stddev": 0.02,
        "samples_per_class": per_class,
        "seed": seed
    })
}

fn blob_dataset(seed: u64, per_class: usize) -> Value {
    let mut v = paired_blobs(seed, per_class);
    v["kind"] = json!("blobs");
    v
}

fn train_config(epochs: usize, loss: Value) -> Value {
    json!({
        "dataset": blob_dataset(11, 50),
        "architecture": { "mlp": { "hidden": [8] } },
        "train": { "epochs": epochs, "batch_size": 32, "seed": 9, "loss": loss }
    })
}

fn natural() -> Value {
    json!({ "mode": "natural" })
}

#[test]
fn synth_writes_deterministic_idx_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "blobs.json", &paired_blobs(3, 20));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["images-idx3-ubyte", "labels-idx1-ubyte", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ds = load_idx(&a.join("images-idx3-ubyte"), &a.join("labels-idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 80);
    assert_eq!(ds.sample_shape(), &[1, 1, 2]);
    assert_eq!(ds.class_counts(), vec![20; 4]);

    let c = dir.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert_ne!(
        fs::read(a.join("images-idx3-ubyte")).unwrap(),
        fs::read(c.join("images-idx3-ubyte")).unwrap()
    );
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(0, natural()));
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let saved = Network::load(&out.join("model.json")).unwrap();
    let init = Network::init(&[2], mlp(2, &[8], 4), 9).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn training_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let loss = json!({ "mode": "robust", "eps": 0.05 });
    let cfg = write_json(dir.path(), "train.json", &train_config(3, loss));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["model.json", "history.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "10"]);
    assert_ne!(fs::read(a.join("model.json")).unwrap(), fs::read(c.join("model.json")).unwrap());
}

#[test]
fn manifest_records_resolved_config_and_hashes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(1, natural()));
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "77", "--threads", "2"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train"]["seed"], 77);
    assert_eq!(m["config"]["train"]["threads"], 2);
    assert!(m["version"].is_string());
    let model = fs::read(out.join("model.json")).unwrap();
    let entry = m["outputs"].as_array().unwrap().iter().find(|e| e["path"] == "model.json").unwrap();
    // independent: sha256sum over the git object header plus contents
    let mut obj = format!("blob {}\0", model.len()).into_bytes();
    obj.extend(&model);
    let hashed = Command::new("sha256sum")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            c.stdin.take().unwrap().write_all(&obj)?;
            c.wait_with_output()
        });
    if let Ok(o) = hashed {
        let hex = String::from_utf8_lossy(&o.stdout);
        assert_eq!(entry["sha256"].as_str().unwrap(), hex.split_whitespace().next().unwrap());
    }
    assert!(!fs::read_to_string(out.join("manifest.json")).unwrap().contains("time"));
}

#[test]
fn schema_errors_exit_2_with_field_path() {
    let dir = TempDir::new().unwrap();
    let loss = json!({ "mode": "igrp", "eps_outer": 0.05, "eps_inner": 0.1 });
    let mut v = train_config(1, loss);
    v["train"]["partition"] = json!({ "n_classes": 4, "groups": [[0, 1], [2, 3]] });
    let cfg = write_json(dir.path(), "bad.json", &v);
    let out = avt(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.loss.eps_inner"));

    let mut v = train_config(1, natural());
    v["train"]["epochz"] = json!(3);
    let cfg = write_json(dir.path(), "typo.json", &v);
    let out = avt(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = TempDir::new().unwrap();
    let mut v = train_config(3, natural());
    v["train"]["optimizer"] = json!({ "type": "sgd_momentum", "lr": 1e300, "momentum": 0.9 });
    let cfg = write_json(dir.path(), "nan.json", &v);
    let out = avt(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Average linkage by exhaustive rescoring, for comparison with `cluster`.
fn oracle_first_merge(rows: &[Vec<f64>]) -> (usize, usize) {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if d(&rows[i], &rows[j]) < best.0 {
                best = (d(&rows[i], &rows[j]), i, j);
            }
        }
    }
    (best.1, best.2)
}

#[test]
fn cluster_two_class_model_has_one_merge_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m.json");
    Network::init(&[3], mlp(3, &[4], 2), 1).unwrap().save(&model).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["cluster", "--model", s(&model), "--out", s(&a)]);
    ok(&["cluster", "--model", s(&model), "--out", s(&b)]);
    let tree = ClusterTree::from_json(&fs::read_to_string(a.join("tree.json")).unwrap()).unwrap();
    assert_eq!(tree.merges().len(), 1);
    for f in ["tree.json", "partition.json", "dendrogram.txt", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn cluster_of_blob_model_follows_linkage_oracle() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config(10, natural()));
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let out = dir.path().join("tree");
    ok(&["cluster", "--model", s(&run.join("model.json")), "--out", s(&out)]);
    let net = Network::load(&run.join("model.json")).unwrap();
    let w = &net.layer_params(net.layers().len() - 1).unwrap().weight;
    let rows: Vec<Vec<f64>> = w.data().chunks(w.shape()[1]).map(<[f64]>::to_vec).collect();
    let tree = ClusterTree::from_json(&fs::read_to_string(out.join("tree.json")).unwrap()).unwrap();
    let first = tree.merges()[0].classes.clone();
    let (i, j) = oracle_first_merge(&rows);
    assert_eq!(first, vec![i, j]);
    let p = GroupPartition::from_json(&fs::read_to_string(out.join("partition.json")).unwrap()).unwrap();
    assert_eq!(p.n_groups(), 2);
}

fn eval_config(dir: &Path, groups: Option<&Path>, eps: Option<Vec<f64>>) -> PathBuf {
    let mut v = json!({ "dataset": blob_dataset(12, 25) });
    if let Some(g) = groups {
        v["groups"] = json!({ "partition": g });
    }
    if let Some(e) = eps {
        v["eps"] = json!(e);
    }
    write_json(dir, "eval.json", &v)
}

fn trained_blob_model(dir: &Path) -> PathBuf {
    let cfg = write_json(dir, "train.json", &train_config(5, natural()));
    let run = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    run.join("model.json")
}

fn pairs_partition(dir: &Path) -> PathBuf {
    let p = dir.join("pairs.json");
    let pairs = GroupPartition::from_groups(&[vec![0, 1], vec![2, 3]], 4).unwrap();
    fs::write(&p, pairs.to_json().unwrap()).unwrap();
    p
}

#[test]
fn eval_reports_round_trip_and_match_library() {
    let dir = TempDir::new().unwrap();
    let model = trained_blob_model(dir.path());
    let part = pairs_partition(dir.path());
    let cfg = eval_config(dir.path(), Some(&part), None);
    let out = dir.path().join("eval");
    let o = ok(&["eval", "--model", s(&model), "--config", s(&cfg), "--out", s(&out), "--eps", "0,0.05"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("v-inter"));

    let net = Network::load(&model).unwrap();
    let ds = avt::data::synth_blobs(&serde_json::from_value(paired_blobs(12, 25)).unwrap()).unwrap();
    let p = GroupPartition::from_json(&fs::read_to_string(&part).unwrap()).unwrap();
    for (eps, file) in [(0.0, "report-eps0.json"), (0.05, "report-eps0.05.json")] {
        let text = fs::read_to_string(out.join(file)).unwrap();
        let report = MetricsReport::from_json(&text).unwrap();
        let direct = evaluate(Predictor::Network(&net), &ds, &p, eps, eps, s(&model)).unwrap();
        assert_eq!(report, direct);
        assert_eq!(report.to_json().unwrap() + "\n", text);
    }
    let at0 = MetricsReport::from_json(&fs::read_to_string(out.join("report-eps0.json")).unwrap()).unwrap();
    assert_eq!(at0.metadata.eps_outer, 0.0);
    assert!(at0.verified_error.is_some());
}

#[test]
fn unknown_model_path_fails() {
    let dir = TempDir::new().unwrap();
    let part = pairs_partition(dir.path());
    let cfg = eval_config(dir.path(), Some(&part), Some(vec![0.0]));
    let out = avt(&[
        "eval",
        "--model",
        s(&dir.path().join("missing.json")),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn certify_requires_eps_flag() {
    let dir = TempDir::new().unwrap();
    let model = trained_blob_model(dir.path());
    let part = pairs_partition(dir.path());
    let cfg = eval_config(dir.path(), Some(&part), Some(vec![0.1]));
    let c = dir.path().join("c");
    let args = ["certify", "--model", s(&model), "--config", s(&cfg), "--out", s(&c)];
    assert_eq!(avt(&args).status.code(), Some(2));
    let mut with_eps = args.to_vec();
    with_eps.extend(["--eps", "0.1"]);
    ok(&with_eps);
    assert!(dir.path().join("c/report-eps0.1.json").is_file());
}

#[test]
fn class_count_mismatch_is_an_error() {
    let dir = TempDir::new().unwrap();
    let model = trained_blob_model(dir.path());
    let p = dir.path().join("three.json");
    fs::write(&p, GroupPartition::from_groups(&[vec![0], vec![1, 2]], 3).unwrap().to_json().unwrap()).unwrap();
    let cfg = eval_config(dir.path(), Some(&p), Some(vec![0.0]));
    let out = avt(&["eval", "--model", s(&model), "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn tree_training_and_evaluation() {
    let dir = TempDir::new().unwrap();
    let tree = avt::groups::agglomerative_cluster(
        &avt::tensor::Tensor::from_rows(&[vec![0.1, 0.1], vec![0.2, 0.1], vec![0.8, 0.9], vec![0.9, 0.9]]).unwrap(),
        avt::groups::Linkage::Average,
    )
    .unwrap();
    fs::write(dir.path().join("tree.json"), tree.to_json().unwrap()).unwrap();
    let cfg = write_json(
        dir.path(),
        "ndt.json",
        &json!({
            "dataset": blob_dataset(11, 150),
            "architecture": { "mlp": { "hidden": [16, 16] } },
            "tree": "tree.json",
            "variant": { "type": "mixed" },
            "eps_table": [0.1],
            "train": {
                "epochs": 30,
                "batch_size": 32,
                "seed": 2,
                "loss": { "mode": "natural" },
                "optimizer": { "type": "adam", "lr": 0.01, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 }
            }
        }),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train-ndt", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train-ndt", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["ndt/ndt.json", "ndt/nodes/r.json", "ndt/nodes/r0.json", "ndt/nodes/r1.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("history/r.jsonl").is_file());

    let ecfg = eval_config(dir.path(), None, Some(vec![0.1]));
    let out = dir.path().join("eval");
    ok(&["eval", "--model", s(&a), "--config", s(&ecfg), "--out", s(&out)]);
    let r = MetricsReport::from_json(&fs::read_to_string(out.join("report-eps0.1.json")).unwrap()).unwrap();
    assert!(r.verified_error.is_none());
    assert!(r.clean_error < 0.1, "{}", r.clean_error);
}

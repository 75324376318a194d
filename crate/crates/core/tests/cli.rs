mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use muli::synthetic::{PlantedConfig, PlantedLogitBackend};
use serde_json::Value;

fn muli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muli"))
        .args(args)
        .env_remove("MULI_BACKEND_URL")
        .env_remove("MULI_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn backend(seed: u64) -> String {
    common::spawn_backend(Arc::new(
        PlantedLogitBackend::new(PlantedConfig {
            vocab_size: 32,
            refusal_tokens: vec![(3, "Sorry".into()), (7, "I cannot".into()), (20, "Unable".into())],
            seed,
            ..PlantedConfig::default()
        })
        .unwrap(),
    ))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn read_json(path: &str) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Writes a planted prompt file and extracts it; returns (prompts, dump).
fn prepare(dir: &Path, url: &str, name: &str, benign: usize, toxic: usize) -> (String, String) {
    let prompts = p(dir, &format!("{name}.jsonl"));
    let dump = p(dir, &format!("{name}.bin"));
    ok(muli(&["synth", "--out", &prompts, "--benign", &benign.to_string(), "--toxic", &toxic.to_string()]));
    ok(muli(&["extract", "--prompts", &prompts, "--out", &dump, "--backend-url", url, "--parallelism", "4"]));
    (prompts, dump)
}

const FAST: [&str; 6] = ["--epochs", "30", "--learning-rate", "0.05", "--batch-size", "16"];

fn train(dump: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--dump", dump, "--out", out];
    args.extend_from_slice(&FAST);
    args.extend_from_slice(extra);
    muli(&args)
}

#[test]
fn pipeline_extract_train_eval_calibrate_toy() {
    let dir = tempfile::tempdir().unwrap();
    let url = backend(0);
    let (prompts, dump) = prepare(dir.path(), &url, "data", 60, 60);
    let model = p(dir.path(), "model.json");
    ok(train(&dump, &model, &[]));
    let m = read_json(&model);
    assert_eq!(m["thresholds"].as_object().unwrap().len(), 4);
    assert!(m["training_meta"]["notes"]["calibration"].as_str().unwrap().starts_with("training"));

    let report = p(dir.path(), "report.json");
    ok(muli(&["eval", "--model", &model, "--dump", &dump, "--out", &report, "--top-k", "3"]));
    let r = read_json(&report);
    for key in ["acc_opt", "auprc"] {
        assert!(r["metrics"][key].is_number());
    }
    for cap in ["10%", "1%", "0.1%", "0.01%"] {
        assert!(r["metrics"]["tpr_at_fpr"][cap]["tpr"].is_number(), "{cap}");
    }
    assert_eq!(r["calibrated"].as_object().unwrap().len(), 4);
    let curves = std::fs::read_to_string(p(dir.path(), "report.curves.csv")).unwrap();
    assert!(curves.starts_with("threshold,fpr,tpr,precision,recall"));
    let top = read_json(&p(dir.path(), "report.top.json"));
    assert_eq!(top["top_negatives"].as_array().unwrap().len(), 3);

    let held = p(dir.path(), "held.json");
    ok(muli(&["calibrate", "--model", &model, "--dump", &dump, "--out", &held]));
    assert!(read_json(&held)["training_meta"]["notes"]["calibration"].as_str().unwrap().starts_with("held-out"));

    // PoRT needs only the dump
    let toy = p(dir.path(), "toy.json");
    ok(muli(&["toy", "--mode", "port", "--dump", &dump, "--refusal-tokens", "3,7,20", "--out", &toy]));
    assert!(read_json(&toy)["port"]["metrics"]["auprc"].as_f64().unwrap() > 0.9);

    let both = p(dir.path(), "both.json");
    ok(muli(&[
        "toy", "--mode", "both", "--dump", &dump, "--prompts", &prompts, "--backend-url", &url,
        "--refusal-tokens", "3,7,20", "--k", "1,10", "--seed", "1", "--out", &both,
    ]));
    let b = read_json(&both);
    for s in b["por"]["1"]["scores"].as_array().unwrap() {
        let v = s["score"].as_f64().unwrap();
        assert!(v == 0.0 || v == 1.0);
    }
    assert!(b["por"]["10"]["agreement_with_port"]["both_positive"].is_number());
}

#[test]
fn transforms_both_train_and_differ() {
    let dir = tempfile::tempdir().unwrap();
    let url = backend(0);
    let (_, dump) = prepare(dir.path(), &url, "sep", 40, 40);
    let mut reports = Vec::new();
    for kind in ["prob", "f-star"] {
        let model = p(dir.path(), &format!("{kind}.json"));
        let report = p(dir.path(), &format!("{kind}.report.json"));
        ok(train(&dump, &model, &["--transform", kind]));
        ok(muli(&["eval", "--model", &model, "--dump", &dump, "--out", &report]));
        reports.push(std::fs::read(&report).unwrap());
    }
    assert_ne!(reports[0], reports[1]);
}

#[test]
fn subsample_keeps_prevalence() {
    let dir = tempfile::tempdir().unwrap();
    let url = backend(0);
    let (_, dump) = prepare(dir.path(), &url, "skew", 90, 10);
    let model = p(dir.path(), "m.json");
    ok(train(&dump, &model, &["--subsample", "10", "--seed", "5"]));
    let meta = &read_json(&model)["training_meta"];
    assert_eq!(meta["n_train"], 10);
    assert_eq!(meta["n_positive"], 1);
}

#[test]
fn fingerprint_mismatch_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dump_a) = prepare(dir.path(), &backend(0), "a", 20, 20);
    let (_, dump_b) = prepare(dir.path(), &backend(1), "b", 20, 20);
    let model = p(dir.path(), "a.json");
    ok(train(&dump_a, &model, &[]));
    let report = p(dir.path(), "cross.json");
    let refused = muli(&["eval", "--model", &model, "--dump", &dump_b, "--out", &report]);
    assert_eq!(code(&refused), 2);
    assert!(!Path::new(&report).exists());
    ok(muli(&["eval", "--model", &model, "--dump", &dump_b, "--out", &report, "--force"]));
}

#[test]
fn unreachable_backend_exits_3_without_touching_output() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = p(dir.path(), "x.jsonl");
    ok(muli(&["synth", "--out", &prompts, "--benign", "2", "--toxic", "2"]));
    let out = p(dir.path(), "x.bin");
    let o = muli(&["extract", "--prompts", &prompts, "--out", &out, "--backend-url", &common::dead_url()]);
    assert_eq!(code(&o), 3);
    assert!(!Path::new(&out).exists());

    std::fs::write(&out, b"previous").unwrap();
    let o = muli(&["extract", "--prompts", &prompts, "--out", &out, "--backend-url", &common::dead_url()]);
    assert_eq!(code(&o), 3);
    assert_eq!(std::fs::read(&out).unwrap(), b"previous");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&muli(&[])), 1);
    assert_eq!(code(&muli(&["train", "--bogus"])), 1);
    assert_eq!(code(&muli(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let o = muli(&["extract", "--prompts", &p(dir.path(), "a.jsonl"), "--out", &p(dir.path(), "o.bin")]);
    assert_eq!(code(&o), 1, "missing backend URL is a usage error");
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let url = backend(0);
    let (_, dump) = prepare(dir.path(), &url, "benign_only", 6, 0);
    assert_eq!(code(&train(&dump, &p(dir.path(), "m.json"), &[])), 2);
    let bad = p(dir.path(), "bad.jsonl");
    std::fs::write(&bad, "{\"label\":0}\n").unwrap();
    let o = muli(&["extract", "--prompts", &bad, "--out", &p(dir.path(), "o.bin"), "--backend-url", &url]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let url = backend(0);
    let prompts = p(dir.path(), "c.jsonl");
    ok(muli(&["synth", "--out", &prompts, "--benign", "10", "--toxic", "10"]));
    let config = dir.path().join("muli.toml");
    std::fs::write(&config, format!("[backend]\nurl = \"{url}\"\n[train]\nlambda = 0.5\nepochs = 3\n")).unwrap();
    let cfg = config.to_string_lossy().into_owned();
    let dump = p(dir.path(), "c.bin");
    // backend URL from the config file
    ok(muli(&["--config", &cfg, "extract", "--prompts", &prompts, "--out", &dump]));

    let from_file = p(dir.path(), "file.json");
    ok(muli(&["--config", &cfg, "train", "--dump", &dump, "--out", &from_file]));
    let c = &read_json(&from_file)["training_meta"]["config"];
    assert_eq!((c["lambda"].as_f64(), c["epochs"].as_u64()), (Some(0.5), Some(3)));

    let from_flag = p(dir.path(), "flag.json");
    ok(muli(&["--config", &cfg, "train", "--dump", &dump, "--out", &from_flag, "--lambda", "0.25"]));
    assert_eq!(read_json(&from_flag)["training_meta"]["config"]["lambda"].as_f64(), Some(0.25));

    // env beats the config file
    let out = Command::new(env!("CARGO_BIN_EXE_muli"))
        .args(["--config", &cfg, "extract", "--prompts", &prompts, "--out", &p(dir.path(), "env.bin")])
        .env("MULI_BACKEND_URL", common::dead_url())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn baseline_features_share_the_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let baseline = p(dir.path(), "lg.jsonl");
    let mut lines = String::new();
    for i in 0..20 {
        let toxic = i % 2 == 0;
        let unsafe_logit = if toxic { 2.0 + i as f64 / 10.0 } else { -1.0 + i as f64 / 20.0 };
        lines.push_str(&format!(
            "{{\"prompt_id\":\"p{i}\",\"unsafe_logit\":{unsafe_logit},\"safe_logit\":0.5,\"label\":{}}}\n",
            u8::from(toxic)
        ));
    }
    std::fs::write(&baseline, lines).unwrap();
    let report = p(dir.path(), "lg.report.json");
    ok(muli(&["eval", "--baseline", &baseline, "--out", &report]));
    let r = read_json(&report);
    assert_eq!(r["metrics"]["auprc"].as_f64(), Some(1.0));
    assert_eq!(r["metrics"]["tpr_at_fpr"].as_object().unwrap().len(), 4);
    assert!(PathBuf::from(p(dir.path(), "lg.report.curves.csv")).exists());
}

use std::path::Path;
use std::process::{Command, Output};

use fastaa::model::ModelParams;
use fastaa::policy::PolicySet;
use serde_json::Value;

fn faa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faa"))
        .args(args)
        .env_remove("FAA_WORKERS")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_outputs_exist(dir: &Path, m: &Value) {
    for out in m["outputs"].as_array().unwrap() {
        let p = Path::new(out.as_str().unwrap());
        let p = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
        assert!(p.exists() || Path::new(out.as_str().unwrap()).exists(), "{out} missing");
    }
}

#[test]
fn search_writes_k_t_n_policies_and_trial_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = faa(&[
        "search", "--data", "synth:2x200", "--k", "2", "--t", "1", "--b", "20", "--n", "3", "--seed", "7",
        "--epochs", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let set = PolicySet::load(&out.join("policies.json")).unwrap();
    assert_eq!(set.len(), 6);

    let log = std::fs::read_to_string(out.join("trials.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 40);
    for l in &lines {
        for key in ["fold", "round", "trial", "params", "loss", "elapsed_ms"] {
            assert!(l.get(key).is_some(), "{key} missing in {l}");
        }
        assert_eq!(l["params"].as_object().unwrap().len(), 30);
    }

    let m = manifest(&out);
    assert_eq!(m["command"], "search");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["k"], 2);
    assert_eq!(m["seeds"]["master"], 7);
    assert!(m["datasets"][0]["fingerprint"].as_str().unwrap().len() >= 16);
    assert_outputs_exist(&out, &m);
}

#[test]
fn missing_dataset_exits_3_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = faa(&["search", "--data", "idx:/no/such/digits", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/digits"));
    assert_eq!(manifest(tmp.path())["status"], "failed");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let o = faa(&["search", "--data", "synth:2x20", "--k", "0", "--out", dir]);
    assert_eq!(o.status.code(), Some(2));
    let o = faa(&["search", "--data", "synth:2x20", "--n", "9", "--b", "3", "--out", dir]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[search]\nfolds = 3\n").unwrap();
    let o = faa(&["search", "--data", "synth:2x20", "--config", cfg.to_str().unwrap(), "--out", dir]);
    assert_eq!(o.status.code(), Some(2));

    let o = faa(&["search", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_fold_training_aborts_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = faa(&[
        "search", "--data", "synth:2x30", "--k", "2", "--t", "1", "--b", "4", "--n", "1", "--lr", "1e9",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(tmp.path());
    assert_eq!(m["status"], "aborted");
    assert!(m["error"].as_str().unwrap().contains("diverged"), "{m}");
}

#[test]
fn config_file_values_apply_below_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("faa.toml");
    std::fs::write(&cfg, "[search]\nk = 3\nt = 1\nb = 6\nn = 2\nseed = 11\n[search.fold_train]\nepochs = 1\n").unwrap();
    let out = tmp.path().join("run");
    let o = faa(&[
        "search", "--data", "synth:3x12", "--config", cfg.to_str().unwrap(), "--n", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!((m["config"]["k"].as_u64(), m["config"]["n"].as_u64()), (Some(3), Some(1)));
    assert_eq!(m["config"]["seed"], 11);
    assert_eq!(PolicySet::load(&out.join("policies.json")).unwrap().len(), 3);
}

#[test]
fn workers_env_overrides_concurrency_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_faa"))
        .args([
            "search", "--data", "synth:2x12", "--k", "2", "--t", "1", "--b", "3", "--n", "1", "--epochs", "1",
            "--concurrency", "2", "--out", tmp.path().to_str().unwrap(),
        ])
        .env("FAA_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(tmp.path())["config"]["concurrency"], 3);
}

#[test]
fn retrain_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let search = tmp.path().join("search");
    let retrain = tmp.path().join("retrain");
    let eval = tmp.path().join("eval");
    let p = |d: &Path| d.to_str().unwrap().to_string();
    let o = faa(&[
        "search", "--data", "synth:3x30", "--k", "2", "--t", "1", "--b", "6", "--n", "2", "--epochs", "2", "--out",
        &p(&search),
    ]);
    assert!(o.status.success());
    let o = faa(&[
        "retrain", "--data", "synth:3x30", "--test-data", "synth:3x10@5", "--policies",
        &p(&search.join("policies.json")), "--epochs", "3", "--out", &p(&retrain),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = retrain.join("model.faam");
    let model = ModelParams::load(&ckpt).unwrap();
    let m = manifest(&retrain);
    assert_eq!(m["summary"]["param_hash"], model.param_hash());
    assert_outputs_exist(&retrain, &m);

    let o = faa(&["eval", "--checkpoint", &p(&ckpt), "--data", "synth:3x10@5", "--out", &p(&eval)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("accuracy"), "{text}");

    let o = faa(&["eval", "--checkpoint", &p(&tmp.path().join("nope.faam")), "--data", "synth:3x10", "--out", &p(&eval)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn apply_with_certain_operations_always_takes_both_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let o = faa(&[
        "apply", "--data", "synth:2x5", "--sub-policy", "Invert:1:0,Rotate:1:0.9", "--draws", "200", "--dump", "4",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(tmp.path().join("branches.csv")).unwrap();
    let rows: Vec<(String, usize)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows[0], ("both".to_string(), 200));
    assert!(rows[1..].iter().all(|(_, c)| *c == 0));
    assert!(tmp.path().join("fixtures").is_dir());

    let o = faa(&["apply", "--data", "synth:2x5", "--sub-policy", "Invert:1:0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_and_bench_write_csv_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |d: &Path| d.to_str().unwrap().to_string();
    let search = tmp.path().join("search");
    assert!(faa(&[
        "search", "--data", "synth:2x20", "--k", "2", "--t", "1", "--b", "4", "--n", "2", "--epochs", "1", "--out",
        &p(&search)
    ])
    .status
    .success());
    let sweep = tmp.path().join("sweep");
    let o = faa(&[
        "sweep-subpolicies", "--data", "synth:2x20", "--test-data", "synth:2x10@3", "--policies",
        &p(&search.join("policies.json")), "--sizes", "5,10,0", "--seeds", "2", "--epochs", "1", "--out", &p(&sweep),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    // 20 sub-policies: 5, 10 and the whole pool
    assert_eq!(csv.lines().count(), 4, "{csv}");

    let bench = tmp.path().join("bench");
    let o = faa(&["bench-tpe", "--runs", "5", "--trials", "40", "--out", &p(&bench)]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(bench.join("bench_tpe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

use std::path::Path;
use std::process::{Command, Output};

use rssgen::dataset::{read_jsonl, Split};
use rssgen::experiment::ExperimentConfig;
use serde_json::Value;

const TINY: &str = r#"{
  "schema": 1,
  "dataset": { "train_frames": 30, "val1_frames": 16, "val2_frames": 12 },
  "train": { "epochs": 2, "seeds": [1], "eval_every": 2 },
  "sweep": { "fractions": [0.5, 1.0], "methods": ["physics", "baseline1"] },
  "adapt": { "epochs": 2, "pool_frames": 8, "fractions": [0.5, 1.0] },
  "pac": { "configs": 2, "trials": 40 }
}"#;

fn rssgen(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rssgen"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_writes_every_split_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("out");
    let v = ok(rssgen(&out, &cfg_path, &["gen"]));
    assert_eq!(v["files"].as_array().unwrap().len(), 15);
    let cfg = ExperimentConfig::from_json(TINY).unwrap();
    assert_eq!(v["config_hash"], cfg.hash());

    for bs in 1..=5 {
        for split in Split::ALL {
            let path = out.join("data").join(format!("bs{bs}_{}.jsonl", split.name()));
            let recs = read_jsonl(&path).unwrap();
            assert_eq!(recs.len(), cfg.dataset.frames(split));
            for r in &recs {
                assert_eq!(r.bs_id, bs);
                assert_eq!(r.split, split);
                assert_eq!(r.config_hash, cfg.hash());
                assert_eq!(r.n_receivers(), 64);
                for i in 0..r.n_receivers() {
                    let recon = r.r_los_dbm[i] + r.r_reflection_db[i] - r.r_blockage_db[i];
                    assert!((r.rss_dbm[i] - recon).abs() < 1e-9);
                }
            }
        }
    }

    let first = std::fs::read(out.join("data/bs2_val1.jsonl")).unwrap();
    let out2 = dir.path().join("out2");
    ok(rssgen(&out2, &cfg_path, &["gen"]));
    assert_eq!(first, std::fs::read(out2.join("data/bs2_val1.jsonl")).unwrap());
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(rssgen(&a, &cfg_path, &["gen"]));
    ok(rssgen(&b, &cfg_path, &["gen", "--seed", "9"]));
    assert_ne!(std::fs::read(a.join("data/bs1_train.jsonl")).unwrap(), std::fs::read(b.join("data/bs1_train.jsonl")).unwrap());
}

#[test]
fn train_without_data_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = rssgen(&dir.path().join("empty"), &cfg_path, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "missing_dataset");
}

#[test]
fn adapt_without_models_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    ok(rssgen(&out_dir, &cfg_path, &["gen"]));
    let out = rssgen(&out_dir, &cfg_path, &["adapt", "--force-adapt"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("rssgen train"));
}

#[test]
fn bad_flags_and_configs_exit_with_usage_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_rssgen")).arg("frobnicate").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert!(v["error"]["kind"].is_string());

    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"schema": 1, "train": {"epochs": 0}}"#).unwrap();
    let out = rssgen(dir.path(), &p, &["config"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&p, r#"{"schema": 1, "unknown_key": 3}"#).unwrap();
    assert_eq!(rssgen(dir.path(), &p, &["config"]).status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_tables_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("out");
    let hash = ExperimentConfig::from_json(TINY).unwrap().hash();
    ok(rssgen(&out, &cfg_path, &["gen"]));

    let train = ok(rssgen(&out, &cfg_path, &["train"]));
    assert_eq!(train["summary"]["config_hash"], hash);
    assert!(out.join("models/bs3_seed1.bin").exists());
    let metrics = std::fs::read_to_string(out.join("train/metrics.csv")).unwrap();
    assert!(metrics.starts_with(&format!("# config_hash: {hash}")));

    let sweep = ok(rssgen(&out, &cfg_path, &["sweep"]));
    assert_eq!(sweep["summary"]["config_hash"], hash);
    let rows = std::fs::read_to_string(out.join("sweep/sweep.csv")).unwrap();
    // header comment, column header, 5 BSs x 2 fractions x 2 methods x 1 seed
    assert_eq!(rows.lines().count(), 2 + 20);

    let adapt = ok(rssgen(&out, &cfg_path, &["adapt", "--force-adapt"]));
    let reqs = adapt["summary"]["requesters"].as_array().unwrap();
    assert_eq!(reqs.len(), 2);
    for r in reqs {
        let gamma: Vec<f64> = serde_json::from_value(r["gamma"].clone()).unwrap();
        assert_eq!(gamma.len(), 4);
        assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let csv = std::fs::read_to_string(out.join("adapt/val1-bs45/adapt.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("bs_id,method,samples_used,epoch,rmse,mae,flops,bytes_exchanged,gamma_json"));
    for plot in ["plot_rmse_vs_samples.json", "plot_rmse_vs_flops.json"] {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("adapt/val1-bs45").join(plot)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash);
        assert!(!v["series"].as_array().unwrap().is_empty());
    }

    let pac = ok(rssgen(&out, &cfg_path, &["pac"]));
    assert_eq!(pac["report"]["all_pass"], true);
    assert!(out.join("pac/pac_report.json").exists());
}

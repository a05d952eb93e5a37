mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use plab_core::cli::{read_feature_dump, write_feature_dump};
use plab_core::collapse::{accumulate_stats, nc1, FeatureBatch};
use plab_core::linalg::Matrix;
use plab_core::runlog::read_csv;

fn plab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plab"))
        .args(args)
        .env_remove("PLAB_DATA_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures(dir: &Path) {
    let o = plab(&["fixtures", "--out-dir", dir.to_str().unwrap(), "--n", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const CONTINUAL: &str = r#"
protocol = "continual"
seeds = [0, 1]
hidden_dims = [16]
tasks = 3
mnist_images = "fixture-images-idx3-ubyte"
mnist_labels = "fixture-labels-idx1-ubyte"
holdout = 20
train_subset = 0
"#;

const WARMSTART: &str = r#"
protocol = "warmstart"
seeds = [0]
hidden_dims = [16]
learning_rate = 0.05
warmup_epochs = 8
phase2_epoch_cap = 1
cifar_train = ["fixture_batch.bin"]
holdout = 20
train_subset = 0
"#;

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = plab(&["continual", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
    let o = plab(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_names_the_path() {
    let o = plab(&["continual", "--config", "/nonexistent/pm.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("plab: error[config]:"), "{err}");
    assert!(err.contains("/nonexistent/pm.toml"));
}

#[test]
fn config_for_another_protocol_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "w.toml", WARMSTART);
    let o = plab(&["continual", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmstart"));
}

#[test]
fn continual_run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let cfg = write_config(dir.path(), "pm.toml", CONTINUAL);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = plab(&["continual", "--config", &cfg, "--seed", "1", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(out.join("continual.csv")).unwrap());
        assert!(out.join("continual.config.toml").exists());
        assert!(out.join("continual_nc1.svg").exists());
    }
    assert_eq!(outputs[0], outputs[1]);
    let log = read_csv(&dir.path().join("run0/continual.csv")).unwrap();
    assert_eq!(log.seeds(), vec![1]);
    assert_eq!(log.len(), 3);
    assert!(log.records.iter().all(|r| r.test_acc.is_some()));

    // The snapshot reruns to the same log.
    let snap = dir.path().join("run0/continual.config.toml");
    let out = dir.path().join("rerun");
    let o = plab(&["continual", "--config", snap.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("continual.csv")).unwrap(), outputs[0]);
}

#[test]
fn analyze_matches_per_window_oracle_on_warmstart_log() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let cfg = write_config(dir.path(), "ws.toml", WARMSTART);
    let out = dir.path().join("ws");
    let o = plab(&["warmstart", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = out.join("warmstart.csv");
    let log = read_csv(&csv).unwrap();

    let an = dir.path().join("an");
    let o = plab(&[
        "analyze", "--input", csv.to_str().unwrap(), "--window", "4", "--out-dir",
        an.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<&plab_core::runlog::RunRecord> = log.records.iter().filter(|r| r.task == 1).collect();
    let x: Vec<f64> = rows.iter().map(|r| r.nc.unwrap().nc1).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.test_acc.unwrap()).collect();
    let text = fs::read_to_string(an.join("sliding.csv")).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), x.len() - 3);
    for (i, line) in lines.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[3].parse::<usize>().unwrap(), i);
        let oracle = common::pearson(&x[i..i + 4], &y[i..i + 4]);
        if cells[4].is_empty() {
            let flat = |v: &[f64]| v.iter().all(|&a| a == v[0]);
            assert!(flat(&x[i..i + 4]) || flat(&y[i..i + 4]));
        } else {
            assert!((cells[4].parse::<f64>().unwrap() - oracle).abs() < 1e-12);
        }
    }
    assert!(an.join("sliding.svg").exists());
    assert!(an.join("correlation.csv").exists());
}

#[test]
fn analyze_rejects_window_longer_than_series() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let cfg = write_config(dir.path(), "pm.toml", CONTINUAL);
    let out = dir.path().join("pm");
    assert!(plab(&["continual", "--config", &cfg, "--out-dir", out.to_str().unwrap()]).status.success());
    let o = plab(&[
        "analyze", "--input", out.join("continual.csv").to_str().unwrap(), "--x", "nc1", "--y",
        "train_acc", "--window", "100", "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("window 100 exceeds"));
}

#[test]
fn nc_metrics_reads_a_feature_dump() {
    let dir = tempfile::tempdir().unwrap();
    let f = Matrix::new(4, 1, vec![0.8, 1.2, -0.8, -1.2]).unwrap();
    let labels = vec![0, 0, 1, 1];
    let z = Matrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let dump = dir.path().join("dump.csv");
    write_feature_dump(&dump, &f, &labels, Some(&z)).unwrap();
    let (f2, l2, z2) = read_feature_dump(&dump).unwrap();
    assert_eq!((f2, l2, z2), (f.clone(), labels.clone(), Some(z)));
    let w = dir.path().join("w.csv");
    fs::write(&w, "1.0\n-1.0\n").unwrap();
    let out = dir.path().join("nc.csv");
    let o = plab(&[
        "nc-metrics", "--features", dump.to_str().unwrap(), "--classifier", w.to_str().unwrap(),
        "--num-classes", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let vals: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert!((vals[0].parse::<f64>().unwrap() - 0.02).abs() < 1e-12);
    assert_eq!(vals[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(vals[4].parse::<f64>().unwrap(), 0.25);

    let direct = nc1(&accumulate_stats(&FeatureBatch::new(f, labels, 2).unwrap()).unwrap()).unwrap();
    assert!((direct - 0.02).abs() < 1e-12);
}

#[test]
fn fixtures_can_reencode_idx_as_cifar() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let img = dir.path().join("fixture-images-idx3-ubyte");
    let lbl = dir.path().join("fixture-labels-idx1-ubyte");
    let o = plab(&[
        "fixtures", "--out-dir", dir.path().to_str().unwrap(), "--cifar-from-idx",
        img.to_str().unwrap(), lbl.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("data_batch_from_idx.bin")).unwrap();
    assert_eq!(bytes.len(), 120 * 3073);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            plab_core::experiments::ExperimentConfig::from_file(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}

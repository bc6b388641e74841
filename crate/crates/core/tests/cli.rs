mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use csgru::data::read_spike_file;

const CONFIG: &str = r#"{
  "cell": "variant",
  "mods": { "mod1": true, "mod2": true, "mod3": true, "mod4": true },
  "task": { "kind": "moving_bar", "n_train": 16, "n_test": 8, "timesteps": 10, "grid": [1, 6, 6], "noise": 0.02 },
  "hidden": [1, 6, 6],
  "epochs": 1,
  "batch_size": 8
}
"#;

fn csgru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csgru")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_metrics_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let res = csgru(&["--seed", "2", "--out-dir", s(&out), "train", "--config", s(&cfg)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(csgru::train::METRICS_HEADER));
    assert_eq!(lines.count(), 1);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 2);
    let net = csgru::checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(net.classes(), 4);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        CONFIG.replace("\"epochs\": 1", "\"epochs\": 0"),
        CONFIG.replace("\"hidden\": [1, 6, 6]", "\"hidden\": [36]"),
        CONFIG.replace("\"variant\"", "\"cuba_lif\""),
        CONFIG.replace("\"batch_size\": 8", "\"batch_size\": 8, \"bogus\": 1"),
        "{ not json".to_string(),
    ];
    for (k, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{k}.json"));
        fs::write(&cfg, text).unwrap();
        let res = csgru(&["--out-dir", s(&out), "train", "--config", s(&cfg)]);
        assert_eq!(res.status.code(), Some(2), "case {k}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let text = CONFIG
        .replace("\"cell\": \"variant\"", "\"cell\": \"gru\"")
        .replace("\"mods\": { \"mod1\": true, \"mod2\": true, \"mod3\": true, \"mod4\": true },", "")
        .replace("\"epochs\": 1", "\"epochs\": 3, \"optimizer\": { \"lr\": 1e307 }");
    fs::write(&cfg, text).unwrap();
    let res = csgru(&["--out-dir", s(&dir.path().join("out")), "train", "--config", s(&cfg)]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = csgru(&["--out-dir", s(dir.path()), "train", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn encode_idx_then_evaluate_from_spike_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::configs_dir().join("../data/tiny-mnist");
    let train = dir.path().join("train.spk");
    let test = dir.path().join("test.spk");
    for (images, labels, out) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", &train),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", &test),
    ] {
        let res = csgru(&[
            "encode",
            "--in",
            s(&data.join(images)),
            "--labels",
            s(&data.join(labels)),
            "--out",
            s(out),
            "--limit",
            "12",
            "--timesteps",
            "4",
            "--pool",
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let ds = read_spike_file(&train).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.frame_shape(), vec![1, 14, 14]);
    assert_eq!(ds.timesteps(), 4);

    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{ "cell": "spikgru", "task": { "kind": "spike_file", "train": "train.spk", "test": "test.spk" },
             "hidden": [16], "epochs": 1, "batch_size": 4 }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = csgru(&["--out-dir", s(&out), "train", "--config", s(&cfg)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let task = dir.path().join("task.json");
    fs::write(&task, r#"{ "kind": "spike_file", "train": "train.spk", "test": "test.spk" }"#).unwrap();
    let res = csgru(&["--out-dir", s(&out), "eval", "--checkpoint", s(&out.join("model.ckpt")), "--task", s(&task)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 12);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn encode_events_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ev.csv");
    fs::write(&csv, "t,x,y,p\n0,0,0,1\n500000,3,2,0\n999999,1,1,1\n").unwrap();
    let out = dir.path().join("ev.spk");
    let res = csgru(&[
        "encode", "--in", s(&csv), "--out", s(&out), "--sensor", "4x4", "--timesteps", "2", "--label", "1",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let ds = read_spike_file(&out).unwrap();
    let seq = &ds.samples[0];
    assert_eq!(seq.label(), 1);
    assert_eq!(seq.data().shape(), &[2, 2, 4, 4]);
    assert_eq!(seq.spike_count(), 3);

    fs::write(&csv, "0,0,0,1\n10,9,0,1\n").unwrap();
    let res = csgru(&["encode", "--in", s(&csv), "--out", s(&out), "--sensor", "4x4"]);
    assert_eq!(res.status.code(), Some(1));
    fs::write(&csv, "0,0,0,1\n10,x,0,1\n").unwrap();
    let res = csgru(&["encode", "--in", s(&csv), "--out", s(&out), "--sensor", "4x4"]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
}

#[test]
fn ablate_runs_requested_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let res = csgru(&["--out-dir", s(&out), "ablate", "--config", s(&cfg), "--mods", "2;1,3"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["GRU", "Cuba-LIF", "SpikGRU", "SpikGRU-mod2", "SpikGRU-mod1-3"]);
    for label in &labels {
        assert!(out.join("runs").join(format!("{label}.csv")).exists());
    }
    let res = csgru(&["--out-dir", s(&out), "ablate", "--config", s(&cfg), "--mods", "7"]);
    assert_eq!(res.status.code(), Some(2));
}

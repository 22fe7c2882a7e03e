use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairdp::RngStream;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairdp"))
}

/// `n` rows, groups `a`/`b`/`c` cycling. With `positives_in_c = false` group
/// `c` has no positive labels.
fn write_data(dir: &Path, n: usize, positives_in_c: bool) -> PathBuf {
    let mut rng = RngStream::new(1, 0);
    let mut text = String::from("f1,f2,color,group,y\n");
    for i in 0..n {
        let group = ["a", "b", "c"][i % 3];
        let f1 = rng.standard_normal();
        let f2 = rng.standard_normal();
        let color = ["red", "blue"][rng.below(2)];
        let mut y = u8::from(f1 + 0.5 * f2 + 0.3 * rng.standard_normal() > 0.0);
        if group == "c" && !positives_in_c {
            y = 0;
        }
        writeln!(text, "{f1},{f2},{color},{group},{y}").unwrap();
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_args<'a>(data: &'a Path, out: &'a Path) -> Vec<String> {
    [
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--label",
        "y",
        "--protected",
        "group",
        "--seed",
        "4",
        "--steps",
        "40",
        "--q",
        "0.2",
        "--hidden",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run);
    args.push("--trajectory".into());
    ok(bin().args(&args).output().unwrap());
    for f in [
        "model.json",
        "train_log.jsonl",
        "privacy.json",
        "certificate.json",
        "metrics.json",
        "metrics.csv",
        "spec.toml",
        "round_record.json",
        "certificate_trajectory.json",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 40);
    let cert = json(&run.join("certificate.json"));
    assert_eq!(cert["per_group"].as_object().unwrap().len(), 3);
    let traj = json(&run.join("certificate_trajectory.json"));
    // default switch at 90% of the rounds leaves 4 SGD rounds
    assert_eq!(traj.as_array().unwrap().len(), 4);
}

#[test]
fn certify_reproduces_the_stored_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let run = dir.path().join("run");
    ok(bin().args(train_args(&data, &run)).output().unwrap());
    let out = ok(bin()
        .args(["certify", "--run", run.to_str().unwrap()])
        .output()
        .unwrap());
    assert_eq!(out.stdout, std::fs::read(run.join("certificate.json")).unwrap());

    let odds = ok(bin()
        .args(["certify", "--run", run.to_str().unwrap(), "--event", "equal-odds"])
        .output()
        .unwrap());
    let v: serde_json::Value = serde_json::from_slice(&odds.stdout).unwrap();
    assert_eq!(v["event"], "equal-odds");
    assert_eq!(v["per_group"].as_object().unwrap().len(), 6);
}

#[test]
fn tampered_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let run = dir.path().join("run");
    ok(bin().args(train_args(&data, &run)).output().unwrap());
    let model = std::fs::read_to_string(run.join("model.json")).unwrap();
    std::fs::write(run.join("model.json"), model.replacen("0.", "1.", 1)).unwrap();
    let out = bin()
        .args(["certify", "--run", run.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn empty_event_names_the_group() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, false);
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run);
    args.extend(["--event".into(), "equal-opportunity".into()]);
    let out = bin().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    let text = err["causes"].to_string();
    assert!(text.contains("selects no rows in group 2"), "{text}");
}

#[test]
fn baseline_warns_about_weight_bound() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let run = dir.path().join("run");
    let mut args = train_args(&data, &run);
    args.extend(["--mechanism", "dpsgd", "--clip-m", "0.5"].map(String::from));
    let out = ok(bin().args(&args).output().unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_m is ignored"));
    assert!(!run.join("certificate.json").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let out_dir = dir.path().join("sweep");
    let mut args = train_args(&data, &out_dir);
    args[0] = "sweep".into();
    args.extend(["--axis", "epsilon", "--values", "0.5,1,2,4,8"].map(String::from));
    ok(bin().args(&args).output().unwrap());
    let mut reader = csv::Reader::from_path(out_dir.join("sweep_epsilon.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let eps: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    for (got, want) in eps.iter().zip([0.5, 1.0, 2.0, 4.0, 8.0]) {
        assert!(*got <= want && *got >= 0.99 * want, "{got} vs {want}");
    }
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, true);
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 2\nmechanism = \"fairdp\"\nout = \"{}\"\n\n[dataset]\npath = \"{}\"\nlabel = \"y\"\nprotected = [\"group\"]\n\n[train]\nsteps = 30\nq = 0.2\nhidden = [3]\nclip_m = 0.4\n",
            dir.path().join("cfg-run").display(),
            data.display()
        ),
    )
    .unwrap();
    let out = ok(bin()
        .args(["train", "--config", config.to_str().unwrap(), "--steps", "20"])
        .output()
        .unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], 2);
    let log = std::fs::read_to_string(dir.path().join("cfg-run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let stored = std::fs::read_to_string(dir.path().join("cfg-run/spec.toml")).unwrap();
    assert!(stored.contains("clip_m = 0.4"));
}

#[test]
fn partition_report_lists_groups() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, true);
    let out = ok(bin()
        .args([
            "partition-report",
            "--dataset",
            data.to_str().unwrap(),
            "--label",
            "y",
            "--protected",
            "group",
            "--seed",
            "1",
        ])
        .output()
        .unwrap());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["groups"].as_array().unwrap().len(), 3);
    assert_eq!(v["rows"], 300);
}

#[test]
fn missing_seed_is_rejected() {
    let out = bin()
        .args(["train", "--dataset", "x.csv", "--label", "y", "--protected", "g"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

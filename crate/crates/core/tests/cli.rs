use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isingflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn isingflow")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every output file except the resolved config, which records the
/// output path itself.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.resolved" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path) {
    ok(&[
        "gen-data", "--n", "8", "--n-traj", "3", "--k", "3", "--d", "8", "--seed", "4", "--out", s(dir),
    ]);
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a);
    small_dataset(&b);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 8);
    assert_eq!(manifest["n_traj"], 3);
    assert_eq!(manifest["K"], 3);
    assert!(a.join("observables.csv").exists());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = run(&["gen-data", "--n", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn occupied_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    small_dataset(&dir);
    let args = ["gen-data", "--n", "8", "--n-traj", "1", "--k", "1", "--d", "4", "--out", s(&dir)];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already exists"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nn = 8\nn_traj = 2\nk = 2\nd = 4\nseed = 1\n").unwrap();
    let dir = tmp.path().join("d");
    ok(&["gen-data", "--config", s(&cfg), "--n-traj", "1", "--out", s(&dir)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 8);
    assert_eq!(manifest["n_traj"], 1);
    fs::write(&cfg, "nonsense = 1\n").unwrap();
    assert!(!run(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("e"))]).status.success());
}

#[test]
fn field_before_encoder_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = run(&["train", "--stage", "field", "--data", s(&data), "--models", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder required"));
}

fn train_all(data: &Path, models: &Path) {
    for stage in ["encoder", "field", "projector"] {
        ok(&[
            "train", "--stage", stage, "--data", s(data), "--models", s(models), "--epochs", "3", "--seed", "2",
        ]);
    }
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let (m1, m2) = (tmp.path().join("m1"), tmp.path().join("m2"));
    train_all(&data, &m1);
    train_all(&data, &m2);
    assert_eq!(files(&m1), files(&m2));
    for stage in ["encoder", "field", "projector"] {
        let record: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(m1.join(format!("{stage}.json"))).unwrap()).unwrap();
        let losses: Vec<f64> = record["losses"].as_array().unwrap().iter().map(|l| l.as_f64().unwrap()).collect();
        assert_eq!(losses.len(), 3);
        assert!(losses[2] < losses[0], "{stage} losses {losses:?}");
        assert_eq!(record["final_loss"].as_f64().unwrap(), losses[2]);
    }

    let retrain = run(&["train", "--stage", "encoder", "--data", s(&data), "--models", s(&m1)]);
    assert!(!retrain.status.success());

    let mut predicted = Vec::new();
    for decoder in ["ptheta", "mh10", "mh15", "mc15"] {
        let a = tmp.path().join(format!("{decoder}_a"));
        let b = tmp.path().join(format!("{decoder}_b"));
        for dir in [&a, &b] {
            ok(&[
                "sample", "--decoder", decoder, "--data", s(&data), "--models", s(&m1), "--n-traj", "3", "--seed", "7",
                "--out", s(dir),
            ]);
        }
        assert_eq!(files(&a), files(&b), "{decoder} output differs between runs");
        predicted.push(a.to_str().unwrap().to_string());
    }
    // the model-free baseline ends ordered at T = 1
    let obs = fs::read_to_string(tmp.path().join("mc15_a").join("observables.csv")).unwrap();
    let last: Vec<&str> = obs.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0].parse::<f64>().unwrap(), 1.0);
    assert!(last[2].parse::<f64>().unwrap() > 0.9, "final |m| {}", last[2]);

    assert!(!run(&["sample", "--decoder", "mh20", "--data", s(&data), "--models", s(&m1), "--out", s(&tmp.path().join("x"))])
        .status
        .success());

    let report = tmp.path().join("report.csv");
    let out = ok(&[
        "evaluate", "--data", s(&data), "--models", s(&m1), "--predicted", &predicted.join(","), "--out", s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("method,n,dE_mean"));
    assert_eq!(lines.len(), 6);
    for (line, method) in lines[1..].iter().zip(["gt", "ptheta", "mh10", "mh15", "mc15"]) {
        assert!(line.starts_with(&format!("{method},8,")), "{line}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("mc15"));
}

#[test]
fn onsager_table_has_requested_rows() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("onsager.csv");
    ok(&["onsager", "--points", "9", "--out", s(&path)]);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "T,u_exact,f_integral,f_finite,f_singular");
    assert_eq!(lines.len(), 10);

    ok(&["onsager", "--temps", "2.269", "--out", s(&path), "--force"]);
    let text = fs::read_to_string(&path).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!((row[1] - (-1.4142)).abs() < 2e-3, "u = {}", row[1]);
}

#[test]
fn onsager_finite_column_approaches_integral_as_p_grows() {
    let tmp = TempDir::new().unwrap();
    let gap = |p: &str| -> f64 {
        let path = tmp.path().join(format!("p{p}.csv"));
        ok(&["onsager", "--temps", "2.269", "--p", p, "--out", s(&path)]);
        let text = fs::read_to_string(&path).unwrap();
        let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
        (row[3] - row[2]).abs()
    };
    let gaps: Vec<f64> = ["4", "8", "16", "32"].iter().map(|p| gap(p)).collect();
    for w in gaps.windows(2) {
        assert!(w[1] < w[0], "{gaps:?}");
    }
}

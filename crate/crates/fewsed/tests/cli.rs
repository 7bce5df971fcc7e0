//! End-to-end exercise of the command-line interface:
//! synth -> train-base -> adapt -> run -> score, plus the feature dump.

use std::path::Path;
use std::process::Command;

fn fewsed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fewsed"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("failed to spawn fewsed");
    assert!(
        out.status.success(),
        "command {:?} failed with status {:?}\nstdout: {}\nstderr: {}",
        cmd,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A tiny configuration so the whole pipeline runs in seconds.
fn write_config(path: &Path) {
    std::fs::write(
        path,
        "n_mels = 32\nchannels = 4, 8\nepochs_base = 2\nepochs_ft = 1\npseudo_cap = 8\nnegatives_cap = 8\niterations = 1\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let config = dir.path().join("run.conf");
    let encoder = dir.path().join("encoder.ckpt");
    let stats = dir.path().join("stats.json");
    let run_report = dir.path().join("run.json");
    let adapt_report = dir.path().join("adapt.json");
    let score_report = dir.path().join("score.json");
    let features = dir.path().join("features.mat");
    write_config(&config);

    run_ok(fewsed().args([
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--base-files",
        "2",
        "--test-files",
        "2",
        "--classes",
        "2",
        "--snr-db",
        "20",
        "--base-duration",
        "8",
        "--test-duration",
        "14",
        "--seed",
        "3",
    ]));
    let manifest = corpus.join("manifest.json");
    assert!(manifest.exists());

    run_ok(fewsed().args([
        "train-base",
        "--manifest",
        manifest.to_str().unwrap(),
        "--encoder",
        encoder.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]));
    assert!(encoder.exists() && stats.exists());

    let out = run_ok(fewsed().args([
        "adapt",
        "--manifest",
        manifest.to_str().unwrap(),
        "--encoder",
        encoder.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--report",
        adapt_report.to_str().unwrap(),
        "--epochs",
        "5",
        "--config",
        config.to_str().unwrap(),
    ]));
    assert!(out.contains("support"));
    let adapt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&adapt_report).unwrap()).unwrap();
    assert_eq!(adapt["episodes"].as_array().unwrap().len(), 2);

    let out = run_ok(fewsed().args([
        "run",
        "--manifest",
        manifest.to_str().unwrap(),
        "--encoder",
        encoder.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--report",
        run_report.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]));
    assert!(out.contains("aggregate"));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&run_report).unwrap()).unwrap();
    assert_eq!(run["files"].as_array().unwrap().len(), 2);
    assert!(run["aggregate"]["f_score"].is_number());
    // the effective configuration is echoed into the report
    assert_eq!(run["config"]["n_mels"], 32);

    // score the run's predictions against the ground-truth annotations
    let mut pred_csv = String::from("Audiofilename,Starttime,Endtime\n");
    for file in run["files"].as_array().unwrap() {
        let name = file["file"].as_str().unwrap();
        for ev in file["predicted"].as_array().map(|a| a.as_slice()).unwrap_or(&[]) {
            pred_csv.push_str(&format!(
                "{name},{},{}\n",
                ev["onset"].as_f64().unwrap(),
                ev["offset"].as_f64().unwrap()
            ));
        }
    }
    let pred_path = dir.path().join("pred.csv");
    std::fs::write(&pred_path, pred_csv).unwrap();
    let mut ref_csv = String::from("Audiofilename,Starttime,Endtime\n");
    for name in ["test_00", "test_01"] {
        let ann = std::fs::read_to_string(corpus.join(format!("{name}.csv"))).unwrap();
        for line in ann.lines().skip(1) {
            let mut parts = line.split(',');
            let (file, on, off) = (
                parts.next().unwrap(),
                parts.next().unwrap(),
                parts.next().unwrap(),
            );
            ref_csv.push_str(&format!("{file},{on},{off}\n"));
        }
    }
    let ref_path = dir.path().join("ref.csv");
    std::fs::write(&ref_path, ref_csv).unwrap();
    let out = run_ok(fewsed().args([
        "score",
        "--pred",
        pred_path.to_str().unwrap(),
        "--ref",
        ref_path.to_str().unwrap(),
        "--report",
        score_report.to_str().unwrap(),
    ]));
    assert!(out.contains("aggregate"));
    assert!(score_report.exists());

    // feature dump
    run_ok(fewsed().args([
        "features",
        "dump",
        "--input",
        corpus.join("test_00.wav").to_str().unwrap(),
        "--output",
        features.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]));
    let bytes = std::fs::read(&features).unwrap();
    assert_eq!(&bytes[..4], b"FMAT");
}

#[test]
fn config_error_exits_with_code_2() {
    let out = fewsed()
        .args(["run", "--manifest", "x.json", "--encoder", "e", "--stats", "s", "--report", "r.json", "--set", "tau=2.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewsed()
        .args([
            "run",
            "--manifest",
            dir.path().join("nope.json").to_str().unwrap(),
            "--encoder",
            "e",
            "--stats",
            "s",
            "--report",
            dir.path().join("r.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "scenes": 10,
  "detector": {"epochs": 4},
  "benchmark": {"seeds": 1, "train_scenes": 6, "test_scenes": 2,
                "encoder": {"epochs": 2, "crop_size": 32, "encoder": {"hidden": [16, 8]}}}
}"#;

fn degpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degpr"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = degpr(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL_CONFIG).unwrap();
    dir
}

#[test]
fn kl_of_identical_gaussians_is_zero() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("x.csv"), "0,1\n2,3\n1,1\n4,0\n").unwrap();
    ok(d, &["--out", "g", "gmm-fit", "--input", "x.csv"]);
    let stdout = ok(d, &["--out", "k", "--mc-mode", "standard", "--mc-samples", "5000", "kl", "--p", "g/gmm.json", "--q", "g/gmm.json"]);
    assert_eq!(stdout.trim(), "kl 0 ± 0");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("k/kl.json")).unwrap()).unwrap();
    assert_eq!(json["value"], 0.0);
}

#[test]
fn zero_lambda_training_ignores_the_encoder() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.json", "--out", "data", "synth"]);
    ok(d, &["--config", "small.json", "--out", "enc", "encoder-train", "--manifest", "data/manifest.json"]);
    ok(d, &["--config", "small.json", "--out", "plain", "--lambda-reg", "0", "train", "--manifest", "data/manifest.json"]);
    ok(
        d,
        &["--config", "small.json", "--out", "zero", "--lambda-reg", "0", "train", "--manifest", "data/manifest.json", "--encoder", "enc/encoder.json"],
    );
    for file in ["detector.json", "loss.csv"] {
        assert_eq!(std::fs::read(d.join("plain").join(file)).unwrap(), std::fs::read(d.join("zero").join(file)).unwrap());
    }
    ok(d, &["--config", "small.json", "--out", "e1", "eval", "--manifest", "data/manifest.json", "--detector", "plain/detector.json"]);
    ok(d, &["--config", "small.json", "--out", "e2", "eval", "--manifest", "data/manifest.json", "--detector", "zero/detector.json"]);
    assert_eq!(std::fs::read(d.join("e1/metrics.csv")).unwrap(), std::fs::read(d.join("e2/metrics.csv")).unwrap());
    let header = std::fs::read_to_string(d.join("plain/loss.csv")).unwrap();
    assert!(header.starts_with("step,L_det,L_exp,L_imp,L_total,skipped_pairs\n"));
}

#[test]
fn regularized_training_needs_an_encoder() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "small.json", "--out", "data", "synth"]);
    let out = degpr(d, &["--config", "small.json", "--out", "t", "train", "--manifest", "data/manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: validation:"), "{stderr}");
}

#[test]
fn errors_are_single_lines() {
    let dir = setup();
    let d = dir.path();
    let missing = degpr(d, &["eval", "--manifest", "nope.json", "--detector", "nope.json"]);
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error: io:"), "{stderr}");

    let usage = degpr(d, &["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(String::from_utf8(usage.stderr).unwrap().lines().count(), 1);

    std::fs::write(d.join("counts.csv"), "image,class,predicted,gold\na,iel,3,4\na,en,0,20\n").unwrap();
    let ratio = degpr(d, &["q-ratio", "--counts", "counts.csv"]);
    assert_eq!(ratio.status.code(), Some(1));
    let stderr = String::from_utf8(ratio.stderr).unwrap();
    assert!(stderr.starts_with("error: undefined-ratio:"), "{stderr}");
    assert_eq!(stderr.lines().count(), 1);

    std::fs::write(d.join("bad.json"), r#"{"sedd": 3}"#).unwrap();
    let config = degpr(d, &["--config", "bad.json", "synth"]);
    assert_eq!(config.status.code(), Some(1));
}

#[test]
fn q_ratio_classifies_per_image() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("counts.csv"),
        "image,class,predicted,gold\na,iel,25,30\na,en,100,100\nb,iel,10,20\nb,en,100,100\n",
    )
    .unwrap();
    let stdout = ok(d, &["--out", "q", "q-ratio", "--counts", "counts.csv"]);
    assert!(stdout.contains("precision,recall,f1,accuracy"));
    let table = std::fs::read_to_string(d.join("q/q_ratio.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[1], "a,25,100,25,celiac,30,100,30,celiac");
    assert_eq!(rows[2], "b,10,100,10,non-celiac,20,100,20,non-celiac");
    let summary = std::fs::read_to_string(d.join("q/q_classification.csv")).unwrap();
    assert_eq!(summary.lines().nth(1).unwrap(), "1,1,1,1,1,0,1,0");
}

#[test]
fn ablation_lists_every_variant() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(d, &["--config", "small.json", "--out", "abl", "ablation"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("variant,explicit,implicit,balance"));
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["baseline", "+explicit", "+implicit", "+explicit+implicit", "+explicit+implicit+balance"]);
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("abl/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["benchmark"]["seeds"], 1);
}

#[test]
fn seed_flag_reaches_nested_configs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--seed", "42", "--out", "s", "synth", "--count", "2"]);
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("s/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["scene"]["seed"], 42);
    assert_eq!(resolved["detector"]["seed"], 42);
    assert_eq!(resolved["regularizer"]["seed"], 42);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 2);
}

use std::path::Path;
use std::process::{Command, Output};

fn scseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn gen_phantom_writes_the_requested_patients() {
    let dir = tempfile::tempdir().unwrap();
    let out = scseg(&["gen-phantom", "--out", "data", "--seed", "7", "--patients", "20"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["patients"].as_array().unwrap().len(), 20);
    assert!(dir.path().join("data/checksums.json").is_file());
    let cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("data/phantom.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"train": {"epochs": "many"}}"#).unwrap();
    let out = scseg(&["prepare", "--config", "c.json", "--run", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.epochs"), "{err}");

    let out = scseg(&["prepare", "--run", "run", "--set", "folds.k=0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = scseg(&["smartcrop", "--run", "run", "--mode", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = scseg(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = scseg(&["prepare", "--run", "run", "--dataset", "absent/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));
}

#[test]
fn corrupt_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let gen = scseg(
        &["gen-phantom", "--out", "data", "--patients", "2", "--set", "phantom.slices=[2,2]"],
        dir.path(),
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let mask = dir.path().join("data/P000/mask_000.pgm");
    let mut bytes = std::fs::read(&mask).unwrap();
    let last = bytes.len() - 1;
    bytes[last] = 7;
    std::fs::write(&mask, bytes).unwrap();
    let out = scseg(&["prepare", "--run", "run", "--dataset", "data/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(dir.path().join("data/manifest.json"), "{ not json").unwrap();
    let out = scseg(&["prepare", "--run", "run", "--dataset", "data/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

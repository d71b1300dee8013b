use std::process::Command;

fn vocseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vocseg")).args(args).output().unwrap()
}

#[test]
fn preset_prints_a_parseable_config() {
    let out = vocseg(&["preset", "unet"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("arch = unet"));
    assert!(text.contains("t_max = 40"));
}

#[test]
fn synth_then_empty_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("voc");
    assert!(vocseg(&["synth", root.to_str().unwrap(), "--train", "2", "--val", "1", "--test", "1"]).status.success());
    assert!(root.join("ImageSets/Segmentation/train.txt").is_file());
    let out = vocseg(&["table", "--out", tmp.path().join("runs").to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn bad_config_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("x.conf");
    std::fs::write(&path, "name = x\narch = unet\nmomentum = 0.9\n").unwrap();
    let out = vocseg(&["run", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("momentum"));
}

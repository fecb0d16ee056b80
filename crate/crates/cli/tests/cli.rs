use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dico(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dico"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# toy\npreset = dico-tiny\ninput_size = 8\nout_dir = a\n").unwrap();
    let out = dico(dir.path(), &["flops", "--config", "run.cfg", "--input_size", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar = fs::read_to_string(dir.path().join("a/flops.config.txt")).unwrap();
    assert!(sidecar.contains("input_size=16"), "{sidecar}");
    assert!(sidecar.contains("preset=dico-tiny"), "{sidecar}");
    assert!(dir.path().join("a/flops.csv").exists());
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = dico(dir.path(), &["flops", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = dico(dir.path(), &["flops", "--preset", "dico-tiny", "--input_size", "15"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dico(dir.path(), &["train", "--preset", "dico-tiny", "--data_path", "absent.dids"]);
    assert_eq!(out.status.code(), Some(3));
    let out = dico(dir.path(), &["flops", "--config", "absent.cfg"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/model.ckpt"), b"not a checkpoint").unwrap();
    let out = dico(dir.path(), &["sample", "--preset", "dico-tiny", "--out_dir", "run"]);
    assert_eq!(out.status.code(), Some(3));
}

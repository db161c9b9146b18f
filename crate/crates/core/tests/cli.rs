use std::path::Path;
use std::process::{Command, Output};

use filora::pipeline::write_reference_configs;

fn filora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filora"))
        .args(args)
        .env("FILORA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn gen_data_from_spec_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    write_reference_configs(dir.path()).unwrap();
    let spec = dir.path().join("dataset.toml");
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let first = filora(&["gen-data", "--spec", s(&spec), "--out", s(&a)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let line = String::from_utf8(first.stdout).unwrap();
    assert!(line.starts_with("n=4000 eval=1000 K=4 rho=0.9"), "{line}");
    assert!(filora(&["gen-data", "--spec", s(&spec), "--out", s(&b)]).status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 1 + 4000 + 1000, "header plus one line per sample");
}

#[test]
fn malformed_spec_key_exits_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write_reference_configs(dir.path()).unwrap();
    let spec = dir.path().join("dataset.toml");
    let text = std::fs::read_to_string(&spec).unwrap().replacen("rho", "rhoo", 1);
    std::fs::write(&spec, text).unwrap();
    let out = filora(&["gen-data", "--spec", s(&spec), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rhoo"));
}

#[test]
fn invalid_values_and_flags_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_reference_configs(dir.path()).unwrap();
    let out = filora(&["train", "--manifest", s(&manifest), "--methods", "filora,adapters"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapters"));
    let out = filora(&["report", "--manifest", s(&manifest), "--strengths", "0.9,0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = filora(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_without_checkpoints_names_the_method() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_reference_configs(dir.path()).unwrap();
    let out_dir = dir.path().join("bundle");
    let out = filora(&["report", "--manifest", s(&manifest), "--out", s(&out_dir), "--methods", "lora"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`lora`"));
}

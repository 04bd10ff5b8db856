use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfanc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfanc"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_and_parameter_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sfanc(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&sfanc(dir.path(), &["synth", "--count", "many"])), 2);
    assert_eq!(code(&sfanc(dir.path(), &["synth", "--domain", "C"])), 2);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(code(&sfanc(dir.path(), &["--config", cfg.to_str().unwrap(), "pretrain"])), 2);
    assert_eq!(code(&sfanc(dir.path(), &["--config", "/nonexistent/x.toml", "pretrain"])), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jsonl");
    let o = sfanc(dir.path(), &["train", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);

    let garbage = dir.path().join("bank.json");
    fs::write(&garbage, "{not json").unwrap();
    let o = sfanc(
        dir.path(),
        &["label", "--manifest", missing.to_str().unwrap(), "--bank", garbage.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    fs::write(&cfg, "step_size = 0.5\ncontrol_length = 32\n").unwrap();
    assert_eq!(code(&sfanc(dir.path(), &["--config", cfg.to_str().unwrap(), "pretrain"])), 4);
}

#[test]
fn synth_writes_manifest_and_wav() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfanc(dir.path(), &["--seed", "4", "synth", "--count", "3", "--domain", "A", "--wav"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    let wav = sfanc::wav::read_wav(dir.path().join("tracks.wav")).unwrap();
    assert_eq!(wav.len(), 3 * 16_000);

    let from = dir.path().join("from");
    let o = sfanc(
        &from,
        &["synth", "--from-wav", dir.path().join("tracks.wav").to_str().unwrap()],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(from.join("manifest.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn simulate_with_oracle_selector() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&sfanc(out, &["pretrain"])), 0);
    let bank = out.join("bank.json");
    let o = sfanc(
        out,
        &["simulate", "--bank", bank.to_str().unwrap(), "--noise", "aircraft", "--duration", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("simulate.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3 * 16_000);
    assert_eq!(fs::read_to_string(out.join("filters.csv")).unwrap().lines().count(), 4);

    let cfg = out.join("other.toml");
    fs::write(&cfg, "step_size = 2e-4\n").unwrap();
    let o = sfanc(
        out,
        &["--config", cfg.to_str().unwrap(), "simulate", "--bank", bank.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2, "bank built for another scenario must be refused");
}

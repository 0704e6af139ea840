use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstyle")).args(args).output().expect("spawn vstyle")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn sha_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("sha256 ").map(str::to_string))
        .expect("sha256 line")
}

fn gen_data(out: &Path, seed: &str) -> Output {
    vstyle(&["gen-data", "--profile", "SFT", "--n", "3", "--out", out.to_str().unwrap(), "--seed", seed])
}

#[test]
fn help_exits_zero() {
    let o = vstyle(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("gen-data"));
    assert_eq!(code(&vstyle(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vstyle(&[])), 1);
    assert_eq!(code(&vstyle(&["frobnicate"])), 1);
    assert_eq!(code(&vstyle(&["gen-data", "--profile", "CT"])), 1);
    let d = scratch("usage");
    let o = vstyle(&["gen-data", "--profile", "XL", "--n", "2", "--out", d.join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile"));
    assert_eq!(code(&vstyle(&["train", "--stage", "warmup"])), 1);
    assert_eq!(code(&vstyle(&["ablate", "--arm", "half", "--out", d.to_str().unwrap()])), 1);
}

#[test]
fn conflicting_stylize_flags_exit_one() {
    let d = scratch("conflict");
    let o = gen_data(&d.join("data"), "5");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("data/manifest.json")).unwrap()).unwrap();
    let raw = d.join("data").join(manifest["entries"][0]["raw"].as_str().unwrap());
    assert!(raw.exists());
    let out = d.join("out");
    let ckpt = d.join("no-checkpoint");
    let base = ["stylize", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let run = |extra: &[&str]| code(&vstyle(&[&base[..], extra].concat()));
    // t2v takes no input video
    assert_eq!(run(&["--mode", "t2v", "--style-tag", "sepia", "--input", raw.to_str().unwrap()]), 1);
    // text mode takes no style image
    assert_eq!(
        run(&["--mode", "text", "--style-tag", "sepia", "--style-image", raw.to_str().unwrap(), "--input", raw.to_str().unwrap()]),
        1
    );
    assert_eq!(run(&["--mode", "style-image", "--input", raw.to_str().unwrap()]), 1);
    assert_eq!(run(&["--mode", "text", "--style-tag", "watercolour", "--input", raw.to_str().unwrap()]), 1);
    assert_eq!(run(&["--mode", "text", "--style-tag", "sepia", "--input", raw.to_str().unwrap(), "--steps", "0"]), 1);
    assert!(!out.exists(), "flag errors must not write output");
    // valid flags reach the missing checkpoint
    assert_eq!(run(&["--mode", "text", "--style-tag", "sepia", "--input", raw.to_str().unwrap()]), 2);
}

#[test]
fn missing_paths_exit_two() {
    let d = scratch("missing");
    let nowhere = d.join("nowhere");
    let o = vstyle(&[
        "eval",
        "--checkpoint",
        nowhere.to_str().unwrap(),
        "--test",
        nowhere.to_str().unwrap(),
        "--out",
        d.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = vstyle(&[
        "train",
        "--stage",
        "base",
        "--data-dir",
        nowhere.to_str().unwrap(),
        "--run-dir",
        d.join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&vstyle(&["--config", nowhere.join("c.json").to_str().unwrap(), "eval", "--checkpoint", "a", "--out", "b"])), 2);
}

#[test]
fn malformed_config_is_rejected() {
    let d = scratch("config");
    let c = d.join("c.json");
    std::fs::write(&c, "{\"model\": {\"dim\": \"wide\"}}").unwrap();
    let o = vstyle(&["--config", c.to_str().unwrap(), "gen-data", "--profile", "CT", "--n", "1", "--out", d.join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!d.join("x").exists());
}

#[test]
fn gen_data_is_deterministic() {
    let d = scratch("determinism");
    let a = gen_data(&d.join("a"), "77");
    let b = gen_data(&d.join("b"), "77");
    let c = gen_data(&d.join("c"), "78");
    for o in [&a, &b, &c] {
        assert_eq!(code(o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(sha_line(&a), sha_line(&b));
    assert_ne!(sha_line(&a), sha_line(&c));
    assert!(stdout(&a).contains("style score histogram"));
}

use std::path::Path;
use std::process::{Command, Output};

fn mst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mst")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    mst(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_bad_arguments() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["generate", "--seed", "x", "--out", "o"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
}

#[test]
fn generate_then_eval() {
    let d = tempfile::tempdir().unwrap();
    let seq = d.path().join("seq");
    assert_eq!(code(&["generate", "--seed", "3", "--frames", "4", "--size", "64", "--out", s(&seq)]), 0);
    assert!(seq.join("00000004.ppm").exists());
    let gt = seq.join("groundtruth.txt");
    let csv = d.path().join("m.csv");
    let out = mst(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("aggregate"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("sequence,ao,sr_0.50,sr_0.75,p_20,pnorm,auc\nseq,1.000000"));

    // usage: unequal --pred/--gt counts; too small a frame
    assert_eq!(code(&["eval", "--pred", s(&gt), "--pred", s(&gt), "--gt", s(&gt), "--out", s(&csv)]), 1);
    assert_eq!(code(&["generate", "--seed", "1", "--size", "8", "--out", s(&seq)]), 1);
}

#[test]
fn data_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.txt");
    let csv = d.path().join("m.csv");
    assert_eq!(code(&["eval", "--pred", s(&missing), "--gt", s(&missing), "--out", s(&csv)]), 2);

    let junk = d.path().join("junk.mst");
    std::fs::write(&junk, b"MST1 definitely not a checkpoint").unwrap();
    let seq = d.path().join("seq");
    assert_eq!(code(&["generate", "--seed", "1", "--frames", "2", "--size", "64", "--out", s(&seq)]), 0);
    let pred = d.path().join("p.txt");
    assert_eq!(code(&["track", "--checkpoint", s(&junk), "--sequence", s(&seq), "--out", s(&pred)]), 2);

    let bad = d.path().join("bad.txt");
    std::fs::write(&bad, "1,2,three,4\n").unwrap();
    assert_eq!(code(&["eval", "--pred", s(&bad), "--gt", s(&bad), "--out", s(&csv)]), 2);
}

#[test]
fn missing_initial_box_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let seq = d.path().join("seq");
    assert_eq!(code(&["generate", "--seed", "2", "--frames", "2", "--size", "64", "--out", s(&seq)]), 0);
    let model = d.path().join("model");
    let cfg = d.path().join("tiny.cfg");
    std::fs::write(&cfg, "# smallest useful model\nembed_dim = 16\nnum_layers = 3\nhead_channels = 16\n").unwrap();
    let train = ["train", "--config", s(&cfg), "--data", s(&seq), "--epochs", "1", "--out", s(&model)];
    assert_eq!(code(&train), 0);
    let ckpt = model.join("model.mst");
    assert!(ckpt.exists() && model.join("loss.csv").exists());

    std::fs::write(seq.join("groundtruth.txt"), "").unwrap();
    let pred = d.path().join("p.txt");
    assert_eq!(code(&["track", "--checkpoint", s(&ckpt), "--sequence", s(&seq), "--out", s(&pred)]), 1);
    std::fs::remove_file(seq.join("groundtruth.txt")).unwrap();
    assert_eq!(code(&["track", "--checkpoint", s(&ckpt), "--sequence", s(&seq), "--out", s(&pred)]), 1);
}

#[test]
fn config_errors_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "embed_dim = 7\nnum_heads = 2\n").unwrap();
    assert_eq!(code(&["audit", "--config", s(&cfg)]), 1);
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["audit", "--config", s(&cfg)]), 1);
}

#[test]
fn verification_commands_succeed() {
    assert_eq!(code(&["oracle", "--trials", "5"]), 0);
    let out = mst(&["gradcheck", "--module", "softmax", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}

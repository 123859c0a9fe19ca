use std::path::Path;
use std::process::{Command, Output};

use vbsr::imaging::{load_pgm, save_pgm, GrayImage};

fn vbsr(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_vbsr")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "vbsr {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_truth(dir: &Path) {
    let img = GrayImage::from_fn(12, 12, |r, c| if (r / 3 + c / 3) % 2 == 0 { 180.0 } else { 70.0 }).unwrap();
    save_pgm(&img, dir.join("truth.pgm")).unwrap();
}

#[test]
fn synthesize_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_truth(d);
    vbsr(&["synthesize", "--image", "truth.pgm", "--alpha", "2", "--frames", "3", "--snr", "30", "--seed", "4", "--out", "stack"], d);
    assert_eq!(load_pgm(d.join("stack/frame_02.pgm")).unwrap().width(), 6);
    let out = vbsr(
        &["reconstruct", "--stack", "stack/stack.json", "--truth", "truth.pgm", "--max-iters", "20", "--out", "rec"],
        d,
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PSNR"), "{stdout}");
    let est = load_pgm(d.join("rec/estimate.pgm")).unwrap();
    assert_eq!((est.width(), est.height()), (12, 12));
    assert!(d.join("rec/diagnostics.jsonl").is_file());
}

#[test]
fn run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_truth(d);
    std::fs::write(d.join("exp.toml"), "alpha = 2.0\nframes = 2\nsnr_db = [30.0]\nreplications = 1\nmax_iters = 10\n").unwrap();
    let out = vbsr(&["run", "--config", "exp.toml", "--image", "truth.pgm", "--reps", "2", "--out", "res"], d);
    assert!(String::from_utf8(out.stdout).unwrap().contains("truth"));
    let config = std::fs::read_to_string(d.join("res/config.toml")).unwrap();
    assert!(config.contains("replications = 2"), "{config}");
    vbsr(&["summarize", "res/metrics.csv", "--json", "summary.json"], d);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["cells"][0]["runs"], 2);
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vbsr")).args(["run"]).current_dir(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input images"));
    let out = Command::new(env!("CARGO_BIN_EXE_vbsr"))
        .args(["synthesize", "--image", "missing.pgm"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

use std::fs;
use std::path::Path;

use vbsr::evalharness::{self, read_metrics, read_registration, run_dir, run_seed, ExperimentConfig, StackFile};
use vbsr::imaging::{load_pgm, psnr, save_pgm, GrayImage};
use vbsr::obsmodel::{synthesize_observations, GridSpec, RegistrationPrior};
use vbsr::vbengine::{self, PriorConstants, SweepDiagnostics, VbConfig, VbProblem};

fn blocks(size: usize) -> GrayImage {
    GrayImage::from_fn(size, size, |r, c| {
        let v = if (r / 4 + c / 4) % 2 == 0 { 200.0 } else { 60.0 };
        v + 3.0 * (r as f64 * 0.7 + c as f64 * 0.3).sin()
    })
    .unwrap()
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let a = dir.join("blocks.pgm");
    let b = dir.join("ramp.pgm");
    save_pgm(&blocks(12), &a).unwrap();
    save_pgm(&GrayImage::from_fn(12, 12, |r, c| 10.0 * (r + c) as f64).unwrap(), &b).unwrap();
    ExperimentConfig {
        images: vec![a, b],
        alpha: 2.0,
        frames: 3,
        snr_db: vec![25.0, 35.0],
        replications: 2,
        max_iters: 30,
        out: dir.join("out"),
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_covers_every_cell_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let output = evalharness::run_experiment(&config).unwrap();
    assert_eq!(output.rows.len(), 8);
    assert_eq!(output.timings.len(), 8);
    assert!(output.rows.iter().all(|r| !r.failed), "{:?}", output.rows);
    assert_eq!(read_metrics(config.out.join("metrics.csv")).unwrap(), output.rows);
    for row in &output.rows {
        assert_eq!(row.seed, run_seed(0, &row.image, row.snr_db, row.replication));
        let cell = run_dir(&config.out, &row.image, row.snr_db, row.replication);
        for f in ["estimate.pgm", "bilinear.pgm", "edges_h.pgm", "edges_v.pgm", "diagnostics.jsonl"] {
            assert!(cell.join(f).is_file(), "missing {f}");
        }
        assert_eq!(read_registration(cell.join("registration.csv")).unwrap().len(), 3);
        let lines = fs::read_to_string(cell.join("diagnostics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), row.iterations.unwrap());
        let last: SweepDiagnostics = serde_json::from_str(lines.lines().last().unwrap()).unwrap();
        assert_eq!(Some(last.converged), row.converged);
    }
    let summary = evalharness::summarize(&output.rows).unwrap();
    assert_eq!(summary.cells.len(), 4);
    assert_eq!(summary.rmse.len(), 2);
    let mut text = Vec::new();
    evalharness::render_summary(&summary, &mut text).unwrap();
    assert!(String::from_utf8(text).unwrap().contains("blocks"));
}

#[test]
fn metrics_are_reproducible_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.snr_db = vec![30.0];
    config.replications = 1;
    evalharness::run_experiment(&config).unwrap();
    let first = fs::read(config.out.join("metrics.csv")).unwrap();
    config.out = dir.path().join("again");
    evalharness::run_experiment(&config).unwrap();
    assert_eq!(first, fs::read(config.out.join("metrics.csv")).unwrap());
    config.seed = 1;
    config.out = dir.path().join("other");
    evalharness::run_experiment(&config).unwrap();
    assert_ne!(first, fs::read(config.out.join("metrics.csv")).unwrap());
}

#[test]
fn more_frames_do_not_hurt_on_a_clean_stack() {
    let truth = blocks(16);
    let score = |frames: usize| {
        let stack = synthesize_observations(&truth, 2.0, frames, 40.0, &RegistrationPrior::for_alpha(2.0), 5).unwrap();
        let problem = VbProblem::new(stack.grid, &stack.frames, PriorConstants::standard(2.0, frames)).unwrap();
        let result = vbengine::run(&problem, &VbConfig { max_iters: 60, ..VbConfig::default() }).unwrap();
        psnr(&result.pm_image, &truth).unwrap()
    };
    let (one, six) = (score(1), score(6));
    assert!(six > one, "6 frames {six:.2} dB vs 1 frame {one:.2} dB");
}

#[test]
fn stack_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let truth = blocks(12);
    let stack = synthesize_observations(&truth, 3.0, 2, 30.0, &RegistrationPrior::for_alpha(3.0), 9).unwrap();
    let path = dir.path().join("stack.json");
    StackFile::from_stack(&stack, 30.0, 9).save(&path).unwrap();
    let back = StackFile::load(&path).unwrap();
    assert_eq!(back.frame_images().unwrap(), stack.frames);
    assert_eq!(GridSpec::new(back.hr_width, back.hr_height, back.lr_width, back.lr_height).unwrap(), stack.grid);
    save_pgm(&truth, dir.path().join("t.pgm")).unwrap();
    assert_eq!(load_pgm(dir.path().join("t.pgm")).unwrap().to_gray8(), truth.to_gray8());
}

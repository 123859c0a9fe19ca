//! Experiment orchestration: synthesize observation stacks from ground-truth
//! images, reconstruct them, and tabulate PSNR, ISNR and registration errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::edge_maps;
use crate::imaging::{bilinear_upsample, isnr, load_pgm, psnr, save_pgm, GrayImage};
use crate::mathcore::GammaParams;
use crate::obsmodel::{synthesize_observations, RegistrationParams, RegistrationPrior, SyntheticStack};
use crate::vbengine::{self, ConvergenceThresholds, PriorConstants, SrResult, VbConfig, VbProblem};

/// Gamma prior parameters of `(lambda, rho, kappa, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperPriors {
    pub lambda: GammaParams,
    pub rho: GammaParams,
    pub kappa: GammaParams,
    pub beta: GammaParams,
}

impl Default for HyperPriors {
    fn default() -> Self {
        let flat = GammaParams { a: 1e-2, b: 1e-2 };
        Self { lambda: flat, rho: flat, kappa: flat, beta: flat }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Ground-truth HR images (8-bit PGM). The file stem is the image id.
    pub images: Vec<PathBuf>,
    pub alpha: f64,
    pub frames: usize,
    pub snr_db: Vec<f64>,
    pub replications: usize,
    /// Master seed; every run derives its own seed from it.
    pub seed: u64,
    pub hyper_priors: HyperPriors,
    /// Registration prior for every frame; `None` uses the default for `alpha`.
    pub registration_prior: Option<RegistrationPrior>,
    pub thresholds: ConvergenceThresholds,
    pub max_iters: usize,
    pub out: PathBuf,
    /// Concurrent runs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            images: Vec::new(),
            alpha: 4.0,
            frames: 10,
            snr_db: vec![20.0, 25.0, 30.0],
            replications: 10,
            seed: 0,
            hyper_priors: HyperPriors::default(),
            registration_prior: None,
            thresholds: ConvergenceThresholds::default(),
            max_iters: 100,
            out: PathBuf::from("out"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.images.is_empty() {
            return bad("no input images".into());
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be at least 1, got {}", self.alpha));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a nonempty list of finite values".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let mut ids: Vec<String> = self.images.iter().map(|p| image_id(p)).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("image file stems must be unique".into());
        }
        Ok(())
    }

    pub fn registration_prior(&self) -> RegistrationPrior {
        self.registration_prior.unwrap_or_else(|| RegistrationPrior::for_alpha(self.alpha))
    }

    pub fn prior_constants(&self) -> PriorConstants {
        let h = self.hyper_priors;
        PriorConstants {
            lambda: h.lambda,
            rho: h.rho,
            kappa: h.kappa,
            beta: h.beta,
            registration: vec![self.registration_prior(); self.frames],
        }
    }

    pub fn vb_config(&self) -> VbConfig {
        VbConfig { max_iters: self.max_iters, thresholds: self.thresholds, ..VbConfig::default() }
    }
}

pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one `(image, snr, replication)` cell.
pub fn run_seed(master: u64, image: &str, snr_db: f64, replication: usize) -> u64 {
    let mut h = splitmix64(master);
    for b in image.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h = splitmix64(h ^ snr_db.to_bits());
    splitmix64(h ^ replication as u64)
}

/// One CSV row. Metric fields are empty for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub snr_db: f64,
    pub replication: usize,
    pub seed: u64,
    pub failed: bool,
    pub error: String,
    pub psnr_proposed: Option<f64>,
    pub psnr_bilinear: Option<f64>,
    pub isnr_bilinear: Option<f64>,
    /// Squared registration errors averaged over the frames of the run.
    pub se_theta: Option<f64>,
    pub se_o_h: Option<f64>,
    pub se_o_v: Option<f64>,
    pub se_gamma: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

/// Wall-clock time of a run, kept out of the metrics CSV so that file stays reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub image: String,
    pub snr_db: f64,
    pub replication: usize,
    pub seconds: f64,
}

/// Per-frame mean squared error of the registration means against the truth.
pub fn registration_squared_errors(estimate: &[[f64; 4]], truth: &[RegistrationParams]) -> [f64; 4] {
    let mut se = [0.0; 4];
    for (e, t) in estimate.iter().zip(truth) {
        let t = t.to_array();
        for k in 0..4 {
            se[k] += (e[k] - t[k]).powi(2);
        }
    }
    se.map(|s| s / truth.len() as f64)
}

/// Reconstruction of one synthetic stack with its bilinear baseline.
pub struct CellOutcome {
    pub result: SrResult,
    pub bilinear: GrayImage,
    pub psnr_proposed: f64,
    pub psnr_bilinear: f64,
    pub registration_se: [f64; 4],
    pub true_registration: Vec<RegistrationParams>,
}

/// Estimated registration mean of one frame beside its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub frame: usize,
    pub theta: f64,
    pub o_h: f64,
    pub o_v: f64,
    pub gamma: f64,
    pub true_theta: f64,
    pub true_o_h: f64,
    pub true_o_v: f64,
    pub true_gamma: f64,
}

impl CellOutcome {
    pub fn registration_records(&self) -> Vec<RegistrationRecord> {
        self.result
            .registration
            .iter()
            .zip(&self.true_registration)
            .enumerate()
            .map(|(frame, (e, t))| {
                let [theta, o_h, o_v, gamma] = e.mean;
                let [true_theta, true_o_h, true_o_v, true_gamma] = t.to_array();
                RegistrationRecord { frame, theta, o_h, o_v, gamma, true_theta, true_o_h, true_o_v, true_gamma }
            })
            .collect()
    }
}

/// Reconstruct `stack` and score it against `truth`. The baseline upsamples the first frame.
pub fn evaluate_stack(truth: &GrayImage, stack: &SyntheticStack, config: &ExperimentConfig) -> Result<CellOutcome> {
    let problem = VbProblem::new(stack.grid, &stack.frames, config.prior_constants())?;
    let result = vbengine::run(&problem, &config.vb_config())?;
    let bilinear = bilinear_upsample(&stack.frames[0], config.alpha)?;
    let means: Vec<[f64; 4]> = result.registration.iter().map(|r| r.mean).collect();
    Ok(CellOutcome {
        psnr_proposed: psnr(&result.pm_image, truth)?,
        psnr_bilinear: psnr(&bilinear, truth)?,
        registration_se: registration_squared_errors(&means, &stack.registrations),
        true_registration: stack.registrations.clone(),
        result,
        bilinear,
    })
}

fn cell_dir(out: &Path, image: &str, snr_db: f64, replication: usize) -> PathBuf {
    out.join(image).join(format!("snr{snr_db}")).join(format!("rep{replication:02}"))
}

fn write_artifacts(dir: &Path, outcome: &CellOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_pgm(&outcome.result.pm_image, dir.join("estimate.pgm"))?;
    save_pgm(&outcome.bilinear, dir.join("bilinear.pgm"))?;
    let layout = crate::gmrf::build_layout(outcome.result.pm_image.width(), outcome.result.pm_image.height())?;
    let (h, v) = edge_maps(&layout, &outcome.result.edge_means)?;
    save_pgm(&h, dir.join("edges_h.pgm"))?;
    save_pgm(&v, dir.join("edges_v.pgm"))?;
    write_csv(dir.join("registration.csv"), &outcome.registration_records())?;
    let file = fs::File::create(dir.join("diagnostics.jsonl"))?;
    vbengine::write_diagnostics_jsonl(std::io::BufWriter::new(file), &outcome.result.diagnostics)?;
    Ok(())
}

struct Cell<'a> {
    image: &'a str,
    truth: &'a GrayImage,
    snr_db: f64,
    replication: usize,
}

fn run_cell(cell: &Cell<'_>, config: &ExperimentConfig) -> (MetricsRow, RunTiming) {
    let seed = run_seed(config.seed, cell.image, cell.snr_db, cell.replication);
    let start = Instant::now();
    let outcome = synthesize_observations(cell.truth, config.alpha, config.frames, cell.snr_db, &config.registration_prior(), seed)
        .and_then(|stack| evaluate_stack(cell.truth, &stack, config))
        .and_then(|o| {
            write_artifacts(&cell_dir(&config.out, cell.image, cell.snr_db, cell.replication), &o)?;
            Ok(o)
        });
    let mut row = MetricsRow {
        image: cell.image.to_string(),
        snr_db: cell.snr_db,
        replication: cell.replication,
        seed,
        failed: false,
        error: String::new(),
        psnr_proposed: None,
        psnr_bilinear: None,
        isnr_bilinear: None,
        se_theta: None,
        se_o_h: None,
        se_o_v: None,
        se_gamma: None,
        iterations: None,
        converged: None,
    };
    match outcome {
        Ok(o) => {
            let [t, h, v, g] = o.registration_se;
            row.psnr_proposed = Some(o.psnr_proposed);
            row.psnr_bilinear = Some(o.psnr_bilinear);
            row.isnr_bilinear = Some(isnr(o.psnr_proposed, o.psnr_bilinear));
            (row.se_theta, row.se_o_h, row.se_o_v, row.se_gamma) = (Some(t), Some(h), Some(v), Some(g));
            row.iterations = Some(o.result.iterations);
            row.converged = Some(o.result.converged);
        }
        Err(e) => {
            row.failed = true;
            row.error = e.to_string();
        }
    }
    let timing = RunTiming {
        image: cell.image.to_string(),
        snr_db: cell.snr_db,
        replication: cell.replication,
        seconds: start.elapsed().as_secs_f64(),
    };
    (row, timing)
}

/// Rows in `(image, snr, replication)` order, with per-run timings.
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<RunTiming>,
}

/// Run every `(image, snr, replication)` cell, writing per-run artifacts under
/// `config.out` plus `metrics.csv` and `timings.csv`. Engine failures are
/// recorded in their row and do not stop the batch.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let truths: Vec<(String, GrayImage)> = config
        .images
        .iter()
        .map(|p| {
            let img = load_pgm(p)?;
            let ok = |n: usize| {
                let v = n as f64 / config.alpha;
                (v - v.round()).abs() < 1e-9 && v >= 1.0
            };
            if !ok(img.width()) || !ok(img.height()) {
                return Err(Error::Config(format!(
                    "{}: {}x{} is not divisible by alpha = {}",
                    p.display(),
                    img.width(),
                    img.height(),
                    config.alpha
                )));
            }
            Ok((image_id(p), img))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<Cell<'_>> = truths
        .iter()
        .flat_map(|(id, truth)| {
            config.snr_db.iter().flat_map(move |&snr_db| {
                (0..config.replications).map(move |replication| Cell { image: id, truth, snr_db, replication })
            })
        })
        .collect();
    fs::create_dir_all(&config.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (rows, timings): (Vec<_>, Vec<_>) =
        pool.install(|| cells.par_iter().map(|c| run_cell(c, config)).collect::<Vec<_>>()).into_iter().unzip();
    write_csv(config.out.join("metrics.csv"), &rows)?;
    write_csv(config.out.join("timings.csv"), &timings)?;
    Ok(ExperimentOutput { rows, timings })
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation; `single` marks `n = 1`, where the deviation is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub single: bool,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n, single: n == 1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub image: String,
    pub snr_db: f64,
    pub runs: usize,
    pub failures: usize,
    pub converged: usize,
    pub psnr: Stat,
    pub psnr_bilinear: Stat,
    pub isnr: Stat,
}

/// Registration RMSE per SNR, pooled over images and replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub snr_db: f64,
    pub runs: usize,
    pub theta: f64,
    pub o_h: f64,
    pub o_v: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub rmse: Vec<RmseSummary>,
}

impl Summary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn push_unique<T: PartialEq + Clone>(list: &mut Vec<T>, v: &T) {
    if !list.contains(v) {
        list.push(v.clone());
    }
}

/// Aggregate rows, keeping first-appearance order of images and SNRs. Failed
/// runs only count toward `failures`.
pub fn summarize(rows: &[MetricsRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Dimension("no metrics rows to summarize".into()));
    }
    let (mut images, mut snrs) = (Vec::new(), Vec::new());
    for r in rows {
        push_unique(&mut images, &r.image);
        push_unique(&mut snrs, &r.snr_db);
    }
    let ok = |r: &&MetricsRow| !r.failed;
    let mut cells = Vec::new();
    for image in &images {
        for &snr in &snrs {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| &r.image == image && r.snr_db == snr).collect();
            if group.is_empty() {
                continue;
            }
            let good: Vec<&MetricsRow> = group.iter().copied().filter(ok).collect();
            let col = |f: fn(&MetricsRow) -> Option<f64>| -> Vec<f64> { good.iter().filter_map(|r| f(r)).collect() };
            let nan = Stat { mean: f64::NAN, std: f64::NAN, n: 0, single: false };
            cells.push(CellSummary {
                image: image.clone(),
                snr_db: snr,
                runs: group.len(),
                failures: group.len() - good.len(),
                converged: good.iter().filter(|r| r.converged == Some(true)).count(),
                psnr: Stat::of(&col(|r| r.psnr_proposed)).unwrap_or(nan),
                psnr_bilinear: Stat::of(&col(|r| r.psnr_bilinear)).unwrap_or(nan),
                isnr: Stat::of(&col(|r| r.isnr_bilinear)).unwrap_or(nan),
            });
        }
    }
    let rmse = snrs
        .iter()
        .map(|&snr| {
            let good: Vec<&MetricsRow> = rows.iter().filter(|r| r.snr_db == snr).filter(ok).collect();
            let pooled = |f: fn(&MetricsRow) -> Option<f64>| {
                let v: Vec<f64> = good.iter().filter_map(|r| f(r)).collect();
                (v.iter().sum::<f64>() / v.len() as f64).sqrt()
            };
            RmseSummary {
                snr_db: snr,
                runs: good.len(),
                theta: pooled(|r| r.se_theta),
                o_h: pooled(|r| r.se_o_h),
                o_v: pooled(|r| r.se_o_v),
                gamma: pooled(|r| r.se_gamma),
            }
        })
        .collect();
    Ok(Summary { cells, rmse })
}

pub fn read_registration(path: impl AsRef<Path>) -> Result<Vec<RegistrationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Directory holding the artifacts of one run.
pub fn run_dir(out: &Path, image: &str, snr_db: f64, replication: usize) -> PathBuf {
    cell_dir(out, image, snr_db, replication)
}

/// Plain-text tables of a summary.
pub fn render_summary(summary: &Summary, mut out: impl Write) -> Result<()> {
    writeln!(out, "{:<12} {:>6} {:>5} {:>5} {:>5} {:>16} {:>16} {:>16}", "image", "snr", "runs", "fail", "conv", "psnr", "bilinear", "isnr")?;
    let fmt = |s: &Stat| {
        if s.n == 0 {
            "-".to_string()
        } else if s.single {
            format!("{:.2} (n=1)", s.mean)
        } else {
            format!("{:.2} +/- {:.2}", s.mean, s.std)
        }
    };
    for c in &summary.cells {
        writeln!(
            out,
            "{:<12} {:>6} {:>5} {:>5} {:>5} {:>16} {:>16} {:>16}",
            c.image,
            c.snr_db,
            c.runs,
            c.failures,
            c.converged,
            fmt(&c.psnr),
            fmt(&c.psnr_bilinear),
            fmt(&c.isnr)
        )?;
    }
    writeln!(out)?;
    writeln!(out, "{:>6} {:>5} {:>10} {:>10} {:>10} {:>10}", "snr", "runs", "theta", "o_h", "o_v", "gamma")?;
    for r in &summary.rmse {
        writeln!(out, "{:>6} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", r.snr_db, r.runs, r.theta, r.o_h, r.o_v, r.gamma)?;
    }
    Ok(())
}

/// A synthesized stack as written by the `synthesize` command: exact frame
/// values plus the ground truth needed to score a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackFile {
    pub alpha: f64,
    pub hr_width: usize,
    pub hr_height: usize,
    pub lr_width: usize,
    pub lr_height: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub beta: f64,
    pub registrations: Vec<[f64; 4]>,
    /// Row-major frame luminances.
    pub frames: Vec<Vec<f64>>,
}

impl StackFile {
    pub fn from_stack(stack: &SyntheticStack, snr_db: f64, seed: u64) -> Self {
        Self {
            alpha: stack.grid.alpha(),
            hr_width: stack.grid.hr_width(),
            hr_height: stack.grid.hr_height(),
            lr_width: stack.grid.lr_width(),
            lr_height: stack.grid.lr_height(),
            snr_db,
            seed,
            beta: stack.beta,
            registrations: stack.registrations.iter().map(|r| r.to_array()).collect(),
            frames: stack.frames.iter().map(|f| f.data().to_vec()).collect(),
        }
    }

    pub fn frame_images(&self) -> Result<Vec<GrayImage>> {
        self.frames.iter().map(|f| GrayImage::new(self.lr_width, self.lr_height, f.clone())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(fs::File::open(path)?))?)
    }
}

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vbsr::evalharness::{self, image_id, ExperimentConfig, StackFile};
use vbsr::gmrf::{build_layout, edge_maps};
use vbsr::imaging::{bilinear_upsample, load_pgm, psnr, save_pgm, GrayImage};
use vbsr::obsmodel::{synthesize_observations, GridSpec, RegistrationPrior};
use vbsr::vbengine::{self, PriorConstants, VbConfig, VbProblem};

#[derive(Parser)]
#[command(name = "vbsr", version, about = "Variational Bayes multi-frame super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a noisy LR stack from a ground-truth image.
    Synthesize(SynthesizeArgs),
    /// Reconstruct an HR image from a stack written by `synthesize`.
    Reconstruct(ReconstructArgs),
    /// Run the full synthesize/reconstruct/score protocol.
    Run(RunArgs),
    /// Tabulate a metrics CSV.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "stack")]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    /// `stack.json` written by `synthesize`.
    #[arg(long)]
    stack: PathBuf,
    /// Ground truth for scoring, optional.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value = "reconstruction")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth PGM; repeat for several images.
    #[arg(long)]
    image: Vec<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    /// SNR in dB; repeat for several levels.
    #[arg(long)]
    snr: Vec<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// `metrics.csv` from `run`.
    metrics: PathBuf,
    /// Also write the summary as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synthesize(a) => synthesize(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Run(a) => run(a),
        Command::Summarize(a) => summarize(a),
    }
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let truth = load_pgm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let stack = synthesize_observations(&truth, a.alpha, a.frames, a.snr, &RegistrationPrior::for_alpha(a.alpha), a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (l, f) in stack.frames.iter().enumerate() {
        save_pgm(f, a.out.join(format!("frame_{l:02}.pgm")))?;
    }
    save_pgm(&truth, a.out.join("truth.pgm"))?;
    StackFile::from_stack(&stack, a.snr, a.seed).save(a.out.join("stack.json"))?;
    println!("wrote {} frames of {}x{} to {}", a.frames, stack.grid.lr_width(), stack.grid.lr_height(), a.out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let stack = StackFile::load(&a.stack).with_context(|| format!("reading {}", a.stack.display()))?;
    let grid = GridSpec::new(stack.hr_width, stack.hr_height, stack.lr_width, stack.lr_height)?;
    let frames = stack.frame_images()?;
    let problem = VbProblem::new(grid, &frames, PriorConstants::standard(grid.alpha(), frames.len()))?;
    let config = VbConfig { max_iters: a.max_iters, ..VbConfig::default() };
    let result = vbengine::run_observed(
        &problem,
        vbengine::init_state(&problem.prior, &problem.layout, frames.len()),
        &config,
        |d| eprintln!("sweep {:3}  dx {:.3e}  dphi {:.3e}", d.iteration, d.dx, d.dphi.iter().cloned().fold(0.0, f64::max)),
    )?;
    fs::create_dir_all(&a.out)?;
    save_pgm(&result.pm_image, a.out.join("estimate.pgm"))?;
    let (h, v) = edge_maps(&build_layout(grid.hr_width(), grid.hr_height())?, &result.edge_means)?;
    save_pgm(&h, a.out.join("edges_h.pgm"))?;
    save_pgm(&v, a.out.join("edges_v.pgm"))?;
    vbengine::write_diagnostics_jsonl(fs::File::create(a.out.join("diagnostics.jsonl"))?, &result.diagnostics)?;
    println!(
        "{} after {} sweeps; hyperparameter means (lambda, rho, kappa, beta) = {:?}",
        if result.converged { "converged" } else { "stopped at the iteration cap" },
        result.iterations,
        result.hyper_means
    );
    if let Some(path) = a.truth {
        let truth: GrayImage = load_pgm(&path)?;
        let bilinear = bilinear_upsample(&frames[0], grid.alpha())?;
        let (p, b) = (psnr(&result.pm_image, &truth)?, psnr(&bilinear, &truth)?);
        println!("PSNR {p:.2} dB, bilinear {b:.2} dB, ISNR {:.2} dB", p - b);
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if !a.image.is_empty() {
        config.images = a.image;
    }
    if !a.snr.is_empty() {
        config.snr_db = a.snr;
    }
    if let Some(v) = a.alpha {
        config.alpha = v;
    }
    if let Some(v) = a.frames {
        config.frames = v;
    }
    if let Some(v) = a.reps {
        config.replications = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.max_iters {
        config.max_iters = v;
    }
    if let Some(v) = a.workers {
        config.workers = v;
    }
    if let Some(v) = a.out {
        config.out = v;
    }
    if config.images.is_empty() {
        bail!("no input images; pass --image or a config file");
    }
    let ids: Vec<String> = config.images.iter().map(|p| image_id(p)).collect();
    eprintln!(
        "{} x {} SNR levels x {} replications -> {}",
        ids.join(", "),
        config.snr_db.len(),
        config.replications,
        config.out.display()
    );
    let output = evalharness::run_experiment(&config)?;
    fs::write(config.out.join("config.toml"), config.to_toml()?)?;
    let summary = evalharness::summarize(&output.rows)?;
    evalharness::render_summary(&summary, std::io::stdout())?;
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let rows = evalharness::read_metrics(&a.metrics).with_context(|| format!("reading {}", a.metrics.display()))?;
    let summary = evalharness::summarize(&rows)?;
    evalharness::render_summary(&summary, std::io::stdout())?;
    if let Some(path) = a.json {
        fs::write(path, summary.to_json()?)?;
    }
    Ok(())
}

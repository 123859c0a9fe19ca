//! Variational Bayes fixed-point loop.
//!
//! The posterior over `(x, eta, lambda, rho, kappa, beta, Phi)` is approximated
//! by a product of a Gaussian over `x`, independent Bernoullis over `eta`,
//! gammas over the four precisions and a Gaussian per frame registration.
//! `W(phi)`, `ln |A|` and `ln logistic(lambda)` are linearized around the
//! current means, which keeps every factor in closed form.
//!
//! One sweep runs, in order: `eta`, then `x`, then the hyperparameters and the
//! registrations (both from the same mid-sweep state), then rebuilds `W`.

use std::io::Write;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{build_a, build_layout, LineProcessLayout, LineProcessMeans};
use crate::imaging::GrayImage;
use crate::linalg;
use crate::mathcore::{logistic, GammaParams};
use crate::obsmodel::{build_w_jet, GridSpec, RegistrationParams, RegistrationPrior, TransformJet};

pub type Mat4 = [[f64; 4]; 4];

/// Prior hyperparameters of every factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConstants {
    pub lambda: GammaParams,
    pub rho: GammaParams,
    pub kappa: GammaParams,
    pub beta: GammaParams,
    pub registration: Vec<RegistrationPrior>,
}

impl PriorConstants {
    /// Flat gammas with `a = b = 0.01` and the per-frame registration prior for `alpha`.
    pub fn standard(alpha: f64, frames: usize) -> Self {
        let flat = GammaParams { a: 1e-2, b: 1e-2 };
        Self {
            lambda: flat,
            rho: flat,
            kappa: flat,
            beta: flat,
            registration: vec![RegistrationPrior::for_alpha(alpha); frames],
        }
    }

    fn validate(&self) -> Result<()> {
        for g in [self.lambda, self.rho, self.kappa, self.beta] {
            GammaParams::new(g.a, g.b)?;
        }
        for r in &self.registration {
            if r.variance.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Domain("registration prior variances must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gaussian trial factor of one frame's registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRegistration {
    pub mean: [f64; 4],
    pub cov: Mat4,
}

impl FrameRegistration {
    pub fn params(&self) -> RegistrationParams {
        RegistrationParams::from_array(self.mean)
    }
}

/// All variational parameters at one step.
#[derive(Debug, Clone)]
pub struct TrialState {
    pub iteration: usize,
    pub mu_eta: LineProcessMeans,
    pub mu_x: Vec<f64>,
    pub sigma_x: Mat<f64>,
    pub lambda: GammaParams,
    pub rho: GammaParams,
    pub kappa: GammaParams,
    pub beta: GammaParams,
    pub registration: Vec<FrameRegistration>,
}

impl TrialState {
    pub fn hyper_means(&self) -> [f64; 4] {
        [self.lambda.mean(), self.rho.mean(), self.kappa.mean(), self.beta.mean()]
    }

    /// Positivity invariants: every gamma parameter `> 0`, `mu_eta` inside the
    /// open unit interval, and each registration covariance positive definite.
    /// `sigma_x` is positive definite by construction after any `x` update.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, g) in [("lambda", self.lambda), ("rho", self.rho), ("kappa", self.kappa), ("beta", self.beta)] {
            if !(g.a > 0.0 && g.b > 0.0 && g.a.is_finite() && g.b.is_finite()) {
                out.push(format!("{name} gamma parameters ({}, {})", g.a, g.b));
            }
        }
        if self.iteration > 0 && self.mu_eta.as_slice().iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            out.push("edge mean outside (0, 1)".into());
        }
        for (l, r) in self.registration.iter().enumerate() {
            if linalg::cholesky(mat4(&r.cov).as_ref(), "registration covariance").is_err() {
                out.push(format!("frame {l} registration covariance not positive definite"));
            }
        }
        if self.mu_x.iter().any(|v| !v.is_finite()) {
            out.push("non-finite image mean".into());
        }
        out
    }
}

/// Observation stack plus the geometry and priors needed to invert it.
#[derive(Debug, Clone)]
pub struct VbProblem {
    pub grid: GridSpec,
    pub layout: LineProcessLayout,
    pub observations: Vec<Vec<f64>>,
    pub prior: PriorConstants,
}

impl VbProblem {
    pub fn new(grid: GridSpec, frames: &[GrayImage], prior: PriorConstants) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Dimension("need at least one observation".into()));
        }
        for (l, f) in frames.iter().enumerate() {
            if f.width() != grid.lr_width() || f.height() != grid.lr_height() {
                return Err(Error::Dimension(format!(
                    "frame {l} is {}x{}, grid expects {}x{}",
                    f.width(),
                    f.height(),
                    grid.lr_width(),
                    grid.lr_height()
                )));
            }
        }
        if prior.registration.len() != frames.len() {
            return Err(Error::Dimension(format!(
                "{} registration priors for {} frames",
                prior.registration.len(),
                frames.len()
            )));
        }
        prior.validate()?;
        let layout = build_layout(grid.hr_width(), grid.hr_height())?;
        Ok(Self { grid, layout, observations: frames.iter().map(|f| f.data().to_vec()).collect(), prior })
    }

    pub fn n_frames(&self) -> usize {
        self.observations.len()
    }
}

/// State at `t = 0`: zero image mean and covariance, zero edge means, and every
/// other factor equal to its prior.
pub fn init_state(prior: &PriorConstants, layout: &LineProcessLayout, frames: usize) -> TrialState {
    let n = layout.n_pixels();
    TrialState {
        iteration: 0,
        mu_eta: LineProcessMeans::zeros(layout.n_edges()),
        mu_x: vec![0.0; n],
        sigma_x: Mat::zeros(n, n),
        lambda: prior.lambda,
        rho: prior.rho,
        kappa: prior.kappa,
        beta: prior.beta,
        registration: prior
            .registration
            .iter()
            .take(frames)
            .map(|r| FrameRegistration { mean: r.mean, cov: diag4(r.variance) })
            .collect(),
    }
}

/// `W` and its four partials at the current registration mean of every frame.
pub fn frame_operators(grid: &GridSpec, registration: &[FrameRegistration]) -> Result<Vec<TransformJet>> {
    registration
        .iter()
        .map(|r| {
            if !(r.mean[3] > 0.0) {
                return Err(Error::Breakdown(format!("PSF precision mean drifted to {}", r.mean[3])));
            }
            build_w_jet(&r.params(), grid)
        })
        .collect()
}

/// `tr(C_x M_e)` with `C_x = mu mu^T + Sigma`.
fn second_moment_edge_trace(state: &TrialState, i: usize, j: usize) -> f64 {
    let (mu, s) = (&state.mu_x, &state.sigma_x);
    (mu[i] - mu[j]).powi(2) + s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)]
}

/// New edge means from the state at step `t`.
pub fn update_eta(layout: &LineProcessLayout, state: &TrialState) -> Result<LineProcessMeans> {
    let (mu_lambda, mu_rho, mu_kappa) = (state.lambda.mean(), state.rho.mean(), state.kappa.mean());
    let a = build_a(layout, state.mu_eta.as_slice(), mu_rho, mu_kappa)?;
    let a_inv = a.selected_inverse()?;
    let means = layout
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| {
            let c_eta = a_inv.edge_trace(layout, e) - second_moment_edge_trace(state, i, j);
            logistic(mu_lambda + 0.5 * mu_rho * c_eta)
        })
        .collect();
    LineProcessMeans::new(means)
}

/// Gaussian factor of `x`.
#[derive(Debug, Clone)]
pub struct XUpdate {
    pub mu_x: Vec<f64>,
    pub sigma_x: Mat<f64>,
    sigma_x_root: Mat<f64>,
}

/// `C'_W = W^T W + sum_kk' S_kk' W'_k^T W'_k'` written as `B^T B` with
/// `B = [W; U_1..U_4]`, `U_m = sum_k G_km W'_k` and `G G^T = S`.
fn c_prime_w_factor(jet: &TransformJet, cov: &Mat4) -> Result<Mat<f64>> {
    let w = jet.value.as_mat();
    let (ny, nx) = (w.nrows(), w.ncols());
    let g = linalg::psd_factor(mat4(cov).as_ref())?;
    let active: Vec<usize> = (0..4).filter(|&m| (0..4).any(|k| g[(k, m)] != 0.0)).collect();
    let mut b = Mat::<f64>::zeros(ny * (1 + active.len()), nx);
    b.as_mut().submatrix_mut(0, 0, ny, nx).copy_from(w);
    for (slot, &m) in active.iter().enumerate() {
        let mut u = b.as_mut().submatrix_mut(ny * (1 + slot), 0, ny, nx);
        for k in 0..4 {
            let gk = g[(k, m)];
            if gk != 0.0 {
                let dk = jet.partials[k].as_mat();
                for c in 0..nx {
                    for r in 0..ny {
                        u[(r, c)] += gk * dk[(r, c)];
                    }
                }
            }
        }
    }
    Ok(b)
}

/// New `(mu_x, Sigma_x)` from the new edge means, the step-`t` hyperparameters and the step-`t` operators.
pub fn update_x(problem: &VbProblem, state: &TrialState, mu_eta: &LineProcessMeans, ops: &[TransformJet]) -> Result<XUpdate> {
    let n = problem.layout.n_pixels();
    let mu_beta = state.beta.mean();
    let a = build_a(&problem.layout, mu_eta.as_slice(), state.rho.mean(), state.kappa.mean())?;
    let mut p = Mat::<f64>::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for ((jet, reg), y) in ops.iter().zip(&state.registration).zip(&problem.observations) {
        let b = c_prime_w_factor(jet, &reg.cov)?;
        linalg::add_gram_lower(&mut p, b.as_ref(), mu_beta);
        for (r, v) in rhs.iter_mut().zip(linalg::mat_vec(jet.value.as_mat().transpose(), y)) {
            *r += mu_beta * v;
        }
    }
    a.add_to_dense(&mut p, 1.0);
    let l = linalg::cholesky(p.as_ref(), "posterior precision of x (A + beta sum C'_W)")?;
    let root = linalg::lower_inverse(l.as_ref());
    let sigma = linalg::inverse_from_lower_inverse(root.as_ref());
    let mu_x = linalg::mat_vec(sigma.as_ref(), &rhs);
    Ok(XUpdate { mu_x, sigma_x: sigma, sigma_x_root: root })
}

/// Per-frame statistics of `q(x)` against `Z = [W, W'_1, .., W'_4]`:
/// `z_mu[a] = Z_a mu_x` and `traces[a][b] = tr(Z_a Sigma_x Z_b^T)`.
#[derive(Debug, Clone)]
pub struct FrameMoments {
    pub z_mu: [Vec<f64>; 5],
    pub traces: [[f64; 5]; 5],
}

fn z_blocks(jet: &TransformJet) -> [&Mat<f64>; 5] {
    [
        jet.value.as_mat(),
        jet.partials[0].as_mat(),
        jet.partials[1].as_mat(),
        jet.partials[2].as_mat(),
        jet.partials[3].as_mat(),
    ]
}

pub fn frame_moments(ops: &[TransformJet], mu_x: &[f64], sigma_x: &Mat<f64>, sigma_root: Option<&Mat<f64>>) -> Vec<FrameMoments> {
    ops.iter()
        .map(|jet| {
            let blocks = z_blocks(jet);
            let (ny, nx) = (blocks[0].nrows(), blocks[0].ncols());
            let z_mu = blocks.map(|z| linalg::mat_vec(z.as_ref(), mu_x));
            let mut traces = [[0.0; 5]; 5];
            match sigma_root {
                Some(root) => {
                    // tr(Z_a R^T R Z_b^T) = <R Z_a^T, R Z_b^T>
                    let mut zt = Mat::<f64>::zeros(nx, 5 * ny);
                    for (a, z) in blocks.iter().enumerate() {
                        zt.as_mut().submatrix_mut(0, a * ny, nx, ny).copy_from(z.transpose());
                    }
                    let x = linalg::lower_times(root.as_ref(), zt.as_ref());
                    for a in 0..5 {
                        for b in a..5 {
                            let xa = x.as_ref().submatrix(0, a * ny, nx, ny);
                            let xb = x.as_ref().submatrix(0, b * ny, nx, ny);
                            let t = linalg::frobenius_dot(xa, xb);
                            traces[a][b] = t;
                            traces[b][a] = t;
                        }
                    }
                }
                None => {
                    for a in 0..5 {
                        let zs = blocks[a] * sigma_x;
                        for b in a..5 {
                            let t = linalg::frobenius_dot(zs.as_ref(), blocks[b].as_ref());
                            traces[a][b] = t;
                            traces[b][a] = t;
                        }
                    }
                }
            }
            FrameMoments { z_mu, traces }
        })
        .collect()
}

/// Gamma factors of `(lambda, rho, kappa, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperUpdate {
    pub lambda: GammaParams,
    pub rho: GammaParams,
    pub kappa: GammaParams,
    pub beta: GammaParams,
}

/// `sum_l [tr(C_x C'_W) - 2 y^T W mu + y^T y]` for one frame.
fn data_misfit(m: &FrameMoments, cov: &Mat4, y: &[f64]) -> f64 {
    let mut tr = linalg::dot(&m.z_mu[0], &m.z_mu[0]) + m.traces[0][0];
    for k in 0..4 {
        for kk in 0..4 {
            tr += cov[k][kk] * (linalg::dot(&m.z_mu[1 + k], &m.z_mu[1 + kk]) + m.traces[1 + k][1 + kk]);
        }
    }
    tr - 2.0 * linalg::dot(y, &m.z_mu[0]) + linalg::dot(y, y)
}

/// New gamma factors. `state` holds the step-`t` hyperparameters and
/// registration; `mu_eta`, `x` and `moments` are already at `t + 1`.
pub fn update_hyper(
    problem: &VbProblem,
    state: &TrialState,
    mu_eta: &LineProcessMeans,
    x: &XUpdate,
    moments: &[FrameMoments],
) -> Result<HyperUpdate> {
    let prior = &problem.prior;
    let layout = &problem.layout;
    let eta = mu_eta.as_slice();
    let n_eta = layout.n_edges() as f64;
    let (mu_lambda, mu_rho, mu_kappa) = (state.lambda.mean(), state.rho.mean(), state.kappa.mean());

    let a_lambda = prior.lambda.a + n_eta * mu_lambda * logistic(-mu_lambda);
    let b_lambda = prior.lambda.b + eta.iter().map(|h| 1.0 - h).sum::<f64>();

    let a_mid = build_a(layout, eta, mu_rho, mu_kappa)?;
    let a_inv = a_mid.selected_inverse()?;
    let tr_ainv_laplacian: f64 = (0..layout.n_edges()).map(|e| eta[e] * a_inv.edge_trace(layout, e)).sum();
    let a_rho = prior.rho.a + 0.5 * mu_rho * tr_ainv_laplacian;
    let cx_laplacian: f64 = layout
        .edges()
        .iter()
        .zip(eta)
        .map(|(&(i, j), h)| {
            let s = &x.sigma_x;
            h * ((x.mu_x[i] - x.mu_x[j]).powi(2) + s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)])
        })
        .sum();
    let b_rho = prior.rho.b + 0.5 * cx_laplacian;

    let a_kappa = prior.kappa.a + 0.5 * mu_kappa * a_inv.trace();
    let tr_cx = linalg::dot(&x.mu_x, &x.mu_x) + (0..x.mu_x.len()).map(|i| x.sigma_x[(i, i)]).sum::<f64>();
    let b_kappa = prior.kappa.b + 0.5 * tr_cx;

    let n_y = problem.grid.n_y() as f64;
    let a_beta = prior.beta.a + 0.5 * problem.n_frames() as f64 * n_y;
    let misfit: f64 = moments
        .iter()
        .zip(&state.registration)
        .zip(&problem.observations)
        .map(|((m, r), y)| data_misfit(m, &r.cov, y))
        .sum();
    let b_beta = prior.beta.b + 0.5 * misfit;

    let make = |name: &str, a: f64, b: f64| {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Breakdown(format!("{name} update produced a={a}, b={b}")));
        }
        Ok(GammaParams { a, b })
    };
    Ok(HyperUpdate {
        lambda: make("lambda", a_lambda, b_lambda)?,
        rho: make("rho", a_rho, b_rho)?,
        kappa: make("kappa", a_kappa, b_kappa)?,
        beta: make("beta", a_beta, b_beta)?,
    })
}

/// New registration factors, using the step-`t` noise precision mean and
/// registration means with `moments` computed from the `t + 1` image factor.
pub fn update_phi(problem: &VbProblem, state: &TrialState, moments: &[FrameMoments]) -> Result<Vec<FrameRegistration>> {
    let mu_beta = state.beta.mean();
    problem
        .prior
        .registration
        .iter()
        .zip(&state.registration)
        .zip(moments)
        .zip(&problem.observations)
        .enumerate()
        .map(|(l, (((prior, current), m), y))| {
            let mut c1 = [0.0; 4];
            let mut c2 = [[0.0; 4]; 4];
            for k in 0..4 {
                let wk_mu = &m.z_mu[1 + k];
                c1[k] = linalg::dot(&m.z_mu[0], wk_mu) + m.traces[0][1 + k] - linalg::dot(y, wk_mu);
                for kk in 0..4 {
                    c2[k][kk] = linalg::dot(wk_mu, &m.z_mu[1 + kk]) + m.traces[1 + k][1 + kk];
                }
            }
            let mut precision = [[0.0; 4]; 4];
            let mut rhs = [0.0; 4];
            for k in 0..4 {
                let p0 = 1.0 / prior.variance[k];
                precision[k][k] += p0;
                rhs[k] += p0 * prior.mean[k];
                for kk in 0..4 {
                    precision[k][kk] += mu_beta * c2[k][kk];
                    rhs[k] += mu_beta * c2[k][kk] * current.mean[kk];
                }
                rhs[k] -= mu_beta * c1[k];
            }
            let (cov, _) = linalg::spd_inverse(mat4(&precision).as_ref(), &format!("frame {l} registration precision"))?;
            let cov = from_mat4(&cov);
            let mut mean = [0.0; 4];
            for k in 0..4 {
                mean[k] = (0..4).map(|kk| cov[k][kk] * rhs[kk]).sum();
            }
            Ok(FrameRegistration { mean, cov })
        })
        .collect()
}

/// Stopping thresholds on the per-sweep parameter changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceThresholds {
    pub x: f64,
    pub phi: f64,
    /// Per-component scale of registration changes.
    pub phi_scale: [f64; 4],
}

impl Default for ConvergenceThresholds {
    fn default() -> Self {
        Self { x: 1e-4, phi: 1e-4, phi_scale: [1e-3, 1.0, 1.0, 1e-3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMetrics {
    /// `(1/N_x) |mu_x' - mu_x|^2`
    pub dx: f64,
    /// `(1/L) sum_l (mu_phi'_k - mu_phi_k)^2 / scale_k`
    pub dphi: [f64; 4],
}

pub fn check_convergence(next: &TrialState, prev: &TrialState, thresholds: &ConvergenceThresholds) -> (bool, ConvergenceMetrics) {
    let n = next.mu_x.len() as f64;
    let dx = next.mu_x.iter().zip(&prev.mu_x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let frames = next.registration.len() as f64;
    let mut dphi = [0.0; 4];
    for (a, b) in next.registration.iter().zip(&prev.registration) {
        for k in 0..4 {
            dphi[k] += (a.mean[k] - b.mean[k]).powi(2) / thresholds.phi_scale[k] / frames;
        }
    }
    let converged = dx < thresholds.x && dphi.iter().all(|d| *d < thresholds.phi);
    (converged, ConvergenceMetrics { dx, dphi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VbConfig {
    pub max_iters: usize,
    pub thresholds: ConvergenceThresholds,
    /// Keep `(lambda, rho, kappa, beta)` at their initial factors.
    pub freeze_hyper: bool,
    /// Keep every registration factor at its initial value.
    pub freeze_phi: bool,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self { max_iters: 100, thresholds: ConvergenceThresholds::default(), freeze_hyper: false, freeze_phi: false }
    }
}

/// One line of the per-sweep diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostics {
    pub iteration: usize,
    pub dx: f64,
    pub dphi: [f64; 4],
    pub converged: bool,
    /// Posterior means of `(lambda, rho, kappa, beta)` after the sweep.
    pub hyper_means: [f64; 4],
    pub mean_edge: f64,
    pub invariant_violations: Vec<String>,
}

/// Output of one sweep: the new state and the operators at its registration means.
pub struct Sweep {
    pub state: TrialState,
    pub ops: Vec<TransformJet>,
    pub metrics: ConvergenceMetrics,
    pub converged: bool,
}

/// One full sweep from `state` (with `ops` built at its registration means).
pub fn sweep(problem: &VbProblem, state: &TrialState, ops: &[TransformJet], config: &VbConfig) -> Result<Sweep> {
    let mu_eta = update_eta(&problem.layout, state)?;
    let x = update_x(problem, state, &mu_eta, ops)?;
    let moments = frame_moments(ops, &x.mu_x, &x.sigma_x, Some(&x.sigma_x_root));
    let hyper = if config.freeze_hyper {
        HyperUpdate { lambda: state.lambda, rho: state.rho, kappa: state.kappa, beta: state.beta }
    } else {
        update_hyper(problem, state, &mu_eta, &x, &moments)?
    };
    let registration = if config.freeze_phi { state.registration.clone() } else { update_phi(problem, state, &moments)? };
    let next = TrialState {
        iteration: state.iteration + 1,
        mu_eta,
        mu_x: x.mu_x,
        sigma_x: x.sigma_x,
        lambda: hyper.lambda,
        rho: hyper.rho,
        kappa: hyper.kappa,
        beta: hyper.beta,
        registration,
    };
    let ops = if config.freeze_phi { ops.to_vec() } else { frame_operators(&problem.grid, &next.registration)? };
    let (converged, metrics) = check_convergence(&next, state, &config.thresholds);
    Ok(Sweep { state: next, ops, metrics, converged })
}

/// Final estimate and trace of a VB run.
#[derive(Debug, Clone)]
pub struct SrResult {
    pub pm_image: GrayImage,
    pub edge_means: LineProcessMeans,
    pub hyper_means: [f64; 4],
    pub registration: Vec<FrameRegistration>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: Vec<SweepDiagnostics>,
    pub state: TrialState,
}

pub fn run(problem: &VbProblem, config: &VbConfig) -> Result<SrResult> {
    let state = init_state(&problem.prior, &problem.layout, problem.n_frames());
    run_from(problem, state, config)
}

/// Iterate sweeps from an arbitrary starting state until convergence or the cap.
pub fn run_from(problem: &VbProblem, state: TrialState, config: &VbConfig) -> Result<SrResult> {
    run_observed(problem, state, config, |_| {})
}

/// As [`run_from`], calling `observe` after every sweep.
pub fn run_observed(
    problem: &VbProblem,
    mut state: TrialState,
    config: &VbConfig,
    mut observe: impl FnMut(&SweepDiagnostics),
) -> Result<SrResult> {
    let mut ops = frame_operators(&problem.grid, &state.registration)?;
    let mut diagnostics = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        let s = sweep(problem, &state, &ops, config)?;
        let d = SweepDiagnostics {
            iteration: s.state.iteration,
            dx: s.metrics.dx,
            dphi: s.metrics.dphi,
            converged: s.converged,
            hyper_means: s.state.hyper_means(),
            mean_edge: s.state.mu_eta.as_slice().iter().sum::<f64>() / s.state.mu_eta.len() as f64,
            invariant_violations: s.state.invariant_violations(),
        };
        observe(&d);
        diagnostics.push(d);
        state = s.state;
        ops = s.ops;
        converged = s.converged;
        if converged {
            break;
        }
    }
    let pm_image = GrayImage::new(problem.grid.hr_width(), problem.grid.hr_height(), state.mu_x.clone())?;
    Ok(SrResult {
        pm_image,
        edge_means: state.mu_eta.clone(),
        hyper_means: state.hyper_means(),
        registration: state.registration.clone(),
        iterations: state.iteration,
        converged,
        diagnostics,
        state,
    })
}

/// Write diagnostics as one JSON object per line.
pub fn write_diagnostics_jsonl<W: Write>(mut out: W, diagnostics: &[SweepDiagnostics]) -> Result<()> {
    for d in diagnostics {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Exact posterior means by enumerating every binary line process.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub mean_x: Vec<f64>,
    pub mean_eta: Vec<f64>,
    /// Normalized posterior weight of each configuration; bit `e` of the index is `eta_e`.
    pub weights: Vec<f64>,
}

/// Largest line process the enumeration oracle accepts.
pub const MAX_ORACLE_EDGES: usize = 16;

/// Posterior means of `x` and `eta` with hyperparameters and registrations held
/// fixed, by summing the closed-form Gaussian evidence over all `2^{N_eta}` line processes.
pub fn exact_pm_oracle(
    grid: &GridSpec,
    frames: &[Vec<f64>],
    registration: &[RegistrationParams],
    hyper: [f64; 4],
) -> Result<ExactPosterior> {
    let layout = build_layout(grid.hr_width(), grid.hr_height())?;
    let n_eta = layout.n_edges();
    if n_eta > MAX_ORACLE_EDGES {
        return Err(Error::Dimension(format!("{n_eta} edges exceed the enumeration limit of {MAX_ORACLE_EDGES}")));
    }
    if frames.len() != registration.len() {
        return Err(Error::Dimension("one registration per frame required".into()));
    }
    let [lambda, rho, kappa, beta] = hyper;
    let n = layout.n_pixels();
    let mut gram = Mat::<f64>::zeros(n, n);
    let mut b = vec![0.0; n];
    let mut yy = 0.0;
    for (y, phi) in frames.iter().zip(registration) {
        let w = crate::obsmodel::build_w(phi, grid)?;
        gram += w.as_mat().transpose() * w.as_mat();
        for (bi, v) in b.iter_mut().zip(linalg::mat_vec(w.as_mat().transpose(), y)) {
            *bi += beta * v;
        }
        yy += linalg::dot(y, y);
    }
    let n_obs = (frames.len() * grid.n_y()) as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut log_w = Vec::with_capacity(1 << n_eta);
    let mut means = Vec::with_capacity(1 << n_eta);
    for config in 0u32..(1u32 << n_eta) {
        let eta: Vec<f64> = (0..n_eta).map(|e| ((config >> e) & 1) as f64).collect();
        let a = build_a(&layout, &eta, rho, kappa)?;
        let log_det_a = a.log_det()?;
        let mut q = a.to_dense();
        q += &gram * faer::Scale(beta);
        let (q_inv, log_det_q) = linalg::spd_inverse(q.as_ref(), "conditional posterior precision")?;
        let m = linalg::mat_vec(q_inv.as_ref(), &b);
        let log_evidence = 0.5 * (log_det_a - log_det_q) + 0.5 * n_obs * (beta / two_pi).ln() - 0.5 * beta * yy
            + 0.5 * linalg::dot(&b, &m);
        let on = eta.iter().sum::<f64>();
        let log_prior = on * crate::mathcore::ln_logistic(lambda) + (n_eta as f64 - on) * crate::mathcore::ln_logistic(-lambda);
        log_w.push(log_evidence + log_prior);
        means.push(m);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp() / total).collect();
    let mut mean_x = vec![0.0; n];
    let mut mean_eta = vec![0.0; n_eta];
    for (config, (w, m)) in weights.iter().zip(&means).enumerate() {
        for (acc, v) in mean_x.iter_mut().zip(m) {
            *acc += w * v;
        }
        for (e, acc) in mean_eta.iter_mut().enumerate() {
            if (config >> e) & 1 == 1 {
                *acc += w;
            }
        }
    }
    Ok(ExactPosterior { mean_x, mean_eta, weights })
}

fn diag4(v: [f64; 4]) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for k in 0..4 {
        m[k][k] = v[k];
    }
    m
}

fn mat4(m: &Mat4) -> Mat<f64> {
    Mat::from_fn(4, 4, |i, j| m[i][j])
}

fn from_mat4(m: &Mat<f64>) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

//! Causal Gaussian MRF prior with a binary line process.
//!
//! Every pair of 4-adjacent HR pixels carries an edge variable `eta`. Given
//! `eta`, the image is Gaussian with precision
//! `A(eta, rho, kappa) = rho * sum_e eta_e M_e + kappa I`, where `M_e` is the
//! difference operator of edge `e`. The edges themselves are independent
//! Bernoulli variables with success probability `logistic(lambda)`.

use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::linalg;
use crate::mathcore::{ln_logistic, logistic};

/// Edge indexing for a `width x height` lattice: horizontal edges in row-major
/// order, then vertical edges in row-major order. Each pair is `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineProcessLayout {
    width: usize,
    height: usize,
    edges: Vec<(usize, usize)>,
}

pub fn build_layout(width: usize, height: usize) -> Result<LineProcessLayout> {
    if width == 0 || height == 0 || width * height < 2 {
        return Err(Error::Dimension(format!("lattice {width}x{height} has no edges")));
    }
    let mut edges = Vec::with_capacity(2 * width * height - width - height);
    for r in 0..height {
        for c in 0..width - 1 {
            edges.push((r * width + c, r * width + c + 1));
        }
    }
    for r in 0..height - 1 {
        for c in 0..width {
            edges.push((r * width + c, (r + 1) * width + c));
        }
    }
    Ok(LineProcessLayout { width, height, edges })
}

impl LineProcessLayout {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn n_horizontal(&self) -> usize {
        (self.width - 1) * self.height
    }
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
    pub fn edge(&self, e: usize) -> Result<(usize, usize)> {
        self.edges
            .get(e)
            .copied()
            .ok_or_else(|| Error::Dimension(format!("edge {e} out of range (have {})", self.edges.len())))
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.n_edges() {
            return Err(Error::Dimension(format!("eta has {} entries, layout has {} edges", eta.len(), self.n_edges())));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("eta entries must be finite".into()));
        }
        Ok(())
    }

    fn check_image(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_pixels() {
            return Err(Error::Dimension(format!("image has {} pixels, layout has {}", x.len(), self.n_pixels())));
        }
        Ok(())
    }
}

/// Bernoulli means of the line process, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineProcessMeans(Vec<f64>);

impl LineProcessMeans {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("edge mean {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sparse symmetric precision matrix on the lattice: a diagonal plus one
/// off-diagonal weight per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    diag: Vec<f64>,
    edges: Vec<(usize, usize)>,
    off: Vec<f64>,
}

/// `A(eta, rho, kappa)`: diagonal `rho sum_{k~i} eta_ik + kappa`, off-diagonal `-rho eta_ij`.
/// Fractional `eta` is accepted.
pub fn build_a(layout: &LineProcessLayout, eta: &[f64], rho: f64, kappa: f64) -> Result<PrecisionMatrix> {
    layout.check_eta(eta)?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Domain(format!("kappa must be nonnegative, got {kappa}")));
    }
    let mut diag = vec![kappa; layout.n_pixels()];
    let mut off = Vec::with_capacity(eta.len());
    for (&(i, j), &h) in layout.edges.iter().zip(eta) {
        diag[i] += rho * h;
        diag[j] += rho * h;
        off.push(-rho * h);
    }
    Ok(PrecisionMatrix { diag, edges: layout.edges.clone(), off })
}

impl PrecisionMatrix {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entry for each layout edge.
    pub fn off_diagonal(&self) -> &[f64] {
        &self.off
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.dim(), self.dim());
        self.add_to_dense(&mut m, 1.0);
        m
    }

    /// `m += scale * A` on both triangles.
    pub fn add_to_dense(&self, m: &mut Mat<f64>, scale: f64) {
        for (i, d) in self.diag.iter().enumerate() {
            m[(i, i)] += scale * d;
        }
        for (&(i, j), &a) in self.edges.iter().zip(&self.off) {
            m[(i, j)] += scale * a;
            m[(j, i)] += scale * a;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for (&(i, j), &a) in self.edges.iter().zip(&self.off) {
            out[i] += a * x[j];
            out[j] += a * x[i];
        }
        out
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        linalg::dot(x, &self.mul_vec(x))
    }

    /// `tr(A C)` for a symmetric dense `C`.
    pub fn trace_product(&self, c: MatRef<'_, f64>) -> f64 {
        let d: f64 = self.diag.iter().enumerate().map(|(i, a)| a * c[(i, i)]).sum();
        let o: f64 = self.edges.iter().zip(&self.off).map(|(&(i, j), a)| a * (c[(i, j)] + c[(j, i)])).sum();
        d + o
    }

    pub fn log_det(&self) -> Result<f64> {
        Ok(self.selected_inverse()?.log_det)
    }

    /// Largest `|i - j|` over the stored edges.
    pub fn bandwidth(&self) -> usize {
        self.edges.iter().map(|&(i, j)| i.abs_diff(j)).max().unwrap_or(0)
    }

    /// Entries of `A^{-1}` on the diagonal and on every edge, from a banded
    /// Cholesky factor and the Takahashi recurrences. Costs `O(n p^2)` for
    /// bandwidth `p`.
    pub fn selected_inverse(&self) -> Result<SelectedInverse> {
        let n = self.dim();
        let p = self.bandwidth();
        let w = p + 1;
        // column-banded lower storage: band[j * w + d] holds entry (j + d, j)
        let mut a = vec![0.0; n * w];
        for (j, d) in self.diag.iter().enumerate() {
            a[j * w] = *d;
        }
        for (&(i, j), &v) in self.edges.iter().zip(&self.off) {
            let (lo, hi) = (i.min(j), i.max(j));
            a[lo * w + hi - lo] += v;
        }
        let l = match band_cholesky(&a, n, p) {
            Some(l) => l,
            None => {
                let jitter = linalg::JITTER * (self.diag.iter().sum::<f64>() / n as f64).abs();
                for j in 0..n {
                    a[j * w] += jitter;
                }
                band_cholesky(&a, n, p).ok_or_else(|| Error::NotPositiveDefinite { what: "prior precision A".into() })?
            }
        };
        let at = |m: &[f64], r: usize, c: usize| if r >= c { m[c * w + r - c] } else { m[r * w + c - r] };
        let mut z = vec![0.0; n * w];
        for j in (0..n).rev() {
            let last = (j + p).min(n - 1);
            let ljj = l[j * w];
            for i in (j + 1..=last).rev() {
                let s: f64 = (j + 1..=last).map(|k| l[j * w + k - j] * at(&z, i, k)).sum();
                z[j * w + i - j] = -s / ljj;
            }
            let s: f64 = (j + 1..=last).map(|k| l[j * w + k - j] * z[j * w + k - j]).sum();
            z[j * w] = 1.0 / (ljj * ljj) - s / ljj;
        }
        Ok(SelectedInverse {
            diag: (0..n).map(|i| z[i * w]).collect(),
            edge: self.edges.iter().map(|&(i, j)| at(&z, i, j)).collect(),
            log_det: 2.0 * (0..n).map(|j| l[j * w].ln()).sum::<f64>(),
        })
    }

    /// Dense `A^{-1}` and `ln |A|`.
    pub fn inverse(&self) -> Result<(Mat<f64>, f64)> {
        linalg::spd_inverse(self.to_dense().as_ref(), "prior precision A")
    }
}

fn band_cholesky(a: &[f64], n: usize, p: usize) -> Option<Vec<f64>> {
    let w = p + 1;
    let mut l = vec![0.0f64; n * w];
    for j in 0..n {
        let k0 = j.saturating_sub(p);
        let s = a[j * w] - (k0..j).map(|k| l[k * w + j - k].powi(2)).sum::<f64>();
        if !(s > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[j * w] = ljj;
        for i in j + 1..(j + w).min(n) {
            let k0 = i.saturating_sub(p);
            let s: f64 = (k0..j).map(|k| l[k * w + i - k] * l[k * w + j - k]).sum();
            l[j * w + i - j] = (a[j * w + i - j] - s) / ljj;
        }
    }
    Some(l)
}

/// Diagonal and per-edge entries of `A^{-1}`, with `ln |A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedInverse {
    pub diag: Vec<f64>,
    pub edge: Vec<f64>,
    pub log_det: f64,
}

impl SelectedInverse {
    /// `tr(A^{-1} M_e)`.
    pub fn edge_trace(&self, layout: &LineProcessLayout, e: usize) -> f64 {
        let (i, j) = layout.edges[e];
        self.diag[i] + self.diag[j] - 2.0 * self.edge[e]
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }
}

/// `tr(C M_e) = C_ii + C_jj - 2 C_ij` for edge `e = (i, j)`.
pub fn edge_trace(c: MatRef<'_, f64>, layout: &LineProcessLayout, e: usize) -> Result<f64> {
    let (i, j) = layout.edge(e)?;
    if c.nrows() != layout.n_pixels() || c.ncols() != layout.n_pixels() {
        return Err(Error::Dimension(format!("matrix is {}x{}, expected {}", c.nrows(), c.ncols(), layout.n_pixels())));
    }
    Ok(c[(i, i)] + c[(j, j)] - 2.0 * c[(i, j)])
}

fn check_hyper(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// `ln p(eta | lambda) + ln N(x; 0, A(eta, rho, kappa)^{-1})` for binary `eta`.
pub fn log_joint_prior(
    layout: &LineProcessLayout,
    x: &[f64],
    eta: &[f64],
    lambda: f64,
    rho: f64,
    kappa: f64,
) -> Result<f64> {
    check_hyper(&[("lambda", lambda), ("rho", rho), ("kappa", kappa)])?;
    layout.check_image(x)?;
    layout.check_eta(eta)?;
    if eta.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("log_joint_prior needs a binary line process".into()));
    }
    let n_x = layout.n_pixels() as f64;
    let off_edges: f64 = eta.iter().map(|h| 1.0 - h).sum();
    let smooth: f64 = layout.edges.iter().zip(eta).map(|(&(i, j), h)| h * (x[i] - x[j]).powi(2)).sum();
    let ridge = linalg::dot(x, x);
    let log_det = build_a(layout, eta, rho, kappa)?.log_det()?;
    Ok(-lambda * off_edges - 0.5 * rho * smooth - 0.5 * kappa * ridge
        + 0.5 * (log_det - n_x * (2.0 * std::f64::consts::PI).ln())
        + layout.n_edges() as f64 * ln_logistic(lambda))
}

/// First-order expansion of `ln |A(eta, rho, kappa)|` in `(eta, ln rho, ln kappa)`
/// around `(mu_eta, ln mu_rho, ln mu_kappa)`.
pub fn log_det_taylor(
    layout: &LineProcessLayout,
    mu_eta: &[f64],
    mu_rho: f64,
    mu_kappa: f64,
    eta: &[f64],
    rho: f64,
    kappa: f64,
) -> Result<f64> {
    check_hyper(&[("rho", mu_rho), ("kappa", mu_kappa), ("rho", rho), ("kappa", kappa)])?;
    layout.check_eta(eta)?;
    let a0 = build_a(layout, mu_eta, mu_rho, mu_kappa)?;
    let (a0_inv, log_det0) = a0.inverse()?;
    let delta: Vec<f64> = eta.iter().zip(mu_eta).map(|(a, b)| a - b).collect();
    let traces = (0..layout.n_edges())
        .map(|e| edge_trace(a0_inv.as_ref(), layout, e))
        .collect::<Result<Vec<f64>>>()?;
    let edge_term = linalg::dot(&delta, &traces);
    let laplacian_term = linalg::dot(mu_eta, &traces);
    let trace_inv: f64 = (0..layout.n_pixels()).map(|i| a0_inv[(i, i)]).sum();
    Ok(log_det0
        + mu_rho * edge_term
        + (rho / mu_rho).ln() * mu_rho * laplacian_term
        + (kappa / mu_kappa).ln() * mu_kappa * trace_inv)
}

/// A joint draw `(x, eta)` from the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub x: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Draw `eta_e ~ Bernoulli(logistic(lambda))` and `x ~ N(0, A(eta)^{-1})`.
pub fn sample_prior(layout: &LineProcessLayout, lambda: f64, rho: f64, kappa: f64, seed: u64) -> Result<PriorSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior_with(layout, lambda, rho, kappa, &mut rng)
}

pub fn sample_prior_with<R: Rng>(
    layout: &LineProcessLayout,
    lambda: f64,
    rho: f64,
    kappa: f64,
    rng: &mut R,
) -> Result<PriorSample> {
    check_hyper(&[("rho", rho), ("kappa", kappa)])?;
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be finite, got {lambda}")));
    }
    let p_on = logistic(lambda);
    let eta: Vec<f64> = (0..layout.n_edges()).map(|_| if rng.random::<f64>() < p_on { 1.0 } else { 0.0 }).collect();
    let a = build_a(layout, &eta, rho, kappa)?;
    let l = linalg::cholesky(a.to_dense().as_ref(), "prior precision A")?;
    // A = L L^T, so x = L^{-T} z has covariance A^{-1}
    let n = layout.n_pixels();
    let mut z = Mat::<f64>::from_fn(n, 1, |_, _| rng.sample(StandardNormal));
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), z.as_mut(), faer::Par::Seq);
    Ok(PriorSample { x: (0..n).map(|i| z[(i, 0)]).collect(), eta })
}

/// Horizontal (`(w-1) x h`) and vertical (`w x (h-1)`) edge-mean maps. Mean 1
/// (coupled) maps to white, mean 0 (edge present) to black.
pub fn edge_maps(layout: &LineProcessLayout, mu_eta: &LineProcessMeans) -> Result<(GrayImage, GrayImage)> {
    layout.check_eta(mu_eta.as_slice())?;
    let (w, h) = (layout.width, layout.height);
    let to_lum = |m: &[f64]| m.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>();
    let (hor, ver) = mu_eta.as_slice().split_at(layout.n_horizontal());
    let horizontal = if w > 1 { GrayImage::new(w - 1, h, to_lum(hor))? } else { GrayImage::filled(1, 1, 1.0)? };
    let vertical = if h > 1 { GrayImage::new(w, h - 1, to_lum(ver))? } else { GrayImage::filled(1, 1, 1.0)? };
    Ok((horizontal, vertical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use approx::assert_relative_eq;

    #[test]
    fn layout_counts_and_order() {
        assert_eq!(build_layout(40, 40).unwrap().n_edges(), 3120);
        let l = build_layout(2, 2).unwrap();
        assert_eq!(l.edges(), &[(0, 1), (2, 3), (0, 2), (1, 3)]);
        let row = build_layout(3, 1).unwrap();
        assert_eq!(row.edges(), &[(0, 1), (1, 2)]);
        assert!(build_layout(1, 1).is_err());
        assert!(build_layout(0, 4).is_err());
        let l = build_layout(5, 3).unwrap();
        assert_eq!(l.n_edges(), 2 * 15 - 5 - 3);
        assert!(l.edges().iter().all(|&(i, j)| i < j));
        let mut sorted = l.edges().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), l.n_edges());
    }

    #[test]
    fn means_are_validated() {
        assert!(LineProcessMeans::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(LineProcessMeans::new(vec![1.2]).is_err());
        assert!(LineProcessMeans::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_eta_gives_ridge() {
        let l = build_layout(3, 3).unwrap();
        let a = build_a(&l, &vec![0.0; 12], 2.0, 0.7).unwrap().to_dense();
        assert!((a - Mat::<f64>::identity(9, 9) * faer::Scale(0.7)).norm_max() == 0.0);
    }

    #[test]
    fn full_eta_on_square_is_cycle_laplacian() {
        let l = build_layout(2, 2).unwrap();
        let a = build_a(&l, &[1.0; 4], 1.0, 0.0).unwrap().to_dense();
        let expect = Mat::<f64>::from_fn(4, 4, |i, j| match (i, j) {
            _ if i == j => 2.0,
            (0, 3) | (3, 0) | (1, 2) | (2, 1) => 0.0,
            _ => -1.0,
        });
        assert_eq!(a, expect);
    }

    #[test]
    fn build_a_rejects_bad_inputs() {
        let l = build_layout(3, 3).unwrap();
        assert!(build_a(&l, &[1.0; 11], 1.0, 1.0).is_err());
        assert!(build_a(&l, &[1.0; 12], -1.0, 1.0).is_err());
        assert!(build_a(&l, &[1.0; 12], 1.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn quadratic_form_identity(
            x in prop::collection::vec(-1.0f64..1.0, 9),
            eta in prop::collection::vec(0.0f64..=1.0, 12),
            rho in 0.01f64..10.0,
            kappa in 0.0f64..5.0,
        ) {
            let l = build_layout(3, 3).unwrap();
            let a = build_a(&l, &eta, rho, kappa).unwrap();
            let direct: f64 = rho * l.edges().iter().zip(&eta).map(|(&(i, j), h)| h * (x[i] - x[j]).powi(2)).sum::<f64>()
                + kappa * x.iter().map(|v| v * v).sum::<f64>();
            prop_assert!((a.quad_form(&x) - direct).abs() < 1e-12);
            let dense = a.to_dense();
            let xm = Mat::<f64>::from_fn(9, 1, |i, _| x[i]);
            let q = (xm.transpose() * &dense * &xm)[(0, 0)];
            prop_assert!((q - direct).abs() < 1e-12);
        }

        #[test]
        fn positive_kappa_gives_spd(
            eta in prop::collection::vec(0.0f64..=1.0, 12),
            rho in 0.01f64..10.0,
            kappa in 1e-3f64..5.0,
        ) {
            let l = build_layout(3, 3).unwrap();
            prop_assert!(build_a(&l, &eta, rho, kappa).unwrap().log_det().is_ok());
        }
    }

    #[test]
    fn sparse_products_match_dense() {
        let l = build_layout(4, 3).unwrap();
        let eta: Vec<f64> = (0..l.n_edges()).map(|e| (e as f64 * 0.37).fract()).collect();
        let a = build_a(&l, &eta, 1.3, 0.2).unwrap();
        let dense = a.to_dense();
        let x: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let mv = a.mul_vec(&x);
        let dv = linalg::mat_vec(dense.as_ref(), &x);
        for (p, q) in mv.iter().zip(&dv) {
            assert!((p - q).abs() < 1e-13);
        }
        let c = Mat::<f64>::from_fn(12, 12, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let tr = (&dense * &c).diagonal().column_vector().iter().sum::<f64>();
        assert!((a.trace_product(c.as_ref()) - tr).abs() < 1e-12);
    }

    #[test]
    fn selected_inverse_matches_dense() {
        let layout = build_layout(5, 4).unwrap();
        let eta: Vec<f64> = (0..layout.n_edges()).map(|e| ((e * 7) % 5) as f64 / 4.0).collect();
        let a = build_a(&layout, &eta, 2.5, 0.3).unwrap();
        let (inv, ld) = a.inverse().unwrap();
        let sel = a.selected_inverse().unwrap();
        assert_eq!(a.bandwidth(), 5);
        assert_relative_eq!(sel.log_det, ld, max_relative = 1e-12);
        for i in 0..layout.n_pixels() {
            assert_relative_eq!(sel.diag[i], inv[(i, i)], max_relative = 1e-11);
        }
        for (e, &(i, j)) in layout.edges().iter().enumerate() {
            assert_relative_eq!(sel.edge[e], inv[(i, j)], max_relative = 1e-10, epsilon = 1e-13);
            assert_relative_eq!(sel.edge_trace(&layout, e), edge_trace(inv.as_ref(), &layout, e).unwrap(), max_relative = 1e-10);
        }
    }

    #[test]
    fn edge_trace_examples() {
        let l = build_layout(3, 3).unwrap();
        let id = Mat::<f64>::identity(9, 9);
        for e in 0..12 {
            assert_eq!(edge_trace(id.as_ref(), &l, e).unwrap(), 2.0);
        }
        let mu: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let c = Mat::<f64>::from_fn(9, 9, |i, j| mu[i] * mu[j]);
        for (e, &(i, j)) in l.edges().iter().enumerate() {
            assert!((edge_trace(c.as_ref(), &l, e).unwrap() - (mu[i] - mu[j]).powi(2)).abs() < 1e-15);
        }
        assert!(edge_trace(id.as_ref(), &l, 12).is_err());
    }

    #[test]
    fn edge_trace_matches_explicit_product() {
        let l = build_layout(3, 3).unwrap();
        let b = Mat::<f64>::from_fn(9, 9, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let c = &b + b.transpose();
        for (e, &(i, j)) in l.edges().iter().enumerate() {
            let mut m = Mat::<f64>::zeros(9, 9);
            m[(i, i)] = 1.0;
            m[(j, j)] = 1.0;
            m[(i, j)] = -1.0;
            m[(j, i)] = -1.0;
            let tr: f64 = (&c * &m).diagonal().column_vector().iter().sum();
            assert_eq!(edge_trace(c.as_ref(), &l, e).unwrap(), tr);
        }
    }

    fn gaussian_log_density(x: &[f64], a: &Mat<f64>) -> f64 {
        let n = x.len() as f64;
        let (_, log_det) = linalg::spd_inverse(a.as_ref(), "A").unwrap();
        let xm = Mat::<f64>::from_fn(x.len(), 1, |i, _| x[i]);
        let q = (xm.transpose() * a * &xm)[(0, 0)];
        -0.5 * q + 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn log_joint_factorizes() {
        let l = build_layout(3, 3).unwrap();
        let (lambda, rho, kappa) = (0.8, 2.5, 0.3);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).sin()).collect();
        for pattern in [0u32, 0b1010_1100_0111, 0xfff, 0b0000_0011_0000] {
            let eta: Vec<f64> = (0..12).map(|e| ((pattern >> e) & 1) as f64).collect();
            let ln_p_eta: f64 = eta.iter().map(|&h| if h == 1.0 { ln_logistic(lambda) } else { ln_logistic(-lambda) }).sum();
            let a = build_a(&l, &eta, rho, kappa).unwrap().to_dense();
            let expect = ln_p_eta + gaussian_log_density(&x, &a);
            let got = log_joint_prior(&l, &x, &eta, lambda, rho, kappa).unwrap();
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }

    #[test]
    fn all_coupled_edges_carry_no_penalty() {
        let l = build_layout(3, 3).unwrap();
        let x = vec![0.0; 9];
        let (lambda, rho, kappa) = (1.7, 1.0, 1.0);
        let a = log_joint_prior(&l, &x, &[1.0; 12], lambda, rho, kappa).unwrap();
        let ln_det = build_a(&l, &[1.0; 12], rho, kappa).unwrap().log_det().unwrap();
        let expect = 0.5 * (ln_det - 9.0 * (2.0 * std::f64::consts::PI).ln()) + 12.0 * ln_logistic(lambda);
        assert!((a - expect).abs() < 1e-12);
    }

    #[test]
    fn log_joint_rejects_bad_inputs() {
        let l = build_layout(2, 2).unwrap();
        assert!(log_joint_prior(&l, &[0.0; 4], &[0.5; 4], 1.0, 1.0, 1.0).is_err());
        assert!(log_joint_prior(&l, &[0.0; 4], &[1.0; 4], 0.0, 1.0, 1.0).is_err());
        assert!(log_joint_prior(&l, &[0.0; 3], &[1.0; 4], 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn prior_normalizes_on_two_by_two() {
        // sum over eta of p(eta) * integral of N(x) = 1; the Gaussian integral is
        // checked through its determinant, so sum_eta exp(ln p(eta, x=0) + (n/2) ln 2pi - (1/2) ln|A|)
        let l = build_layout(2, 2).unwrap();
        let (lambda, rho, kappa) = (0.6, 1.5, 0.4);
        let n = 4.0;
        let mut total = 0.0;
        for pattern in 0u32..16 {
            let eta: Vec<f64> = (0..4).map(|e| ((pattern >> e) & 1) as f64).collect();
            let at_zero = log_joint_prior(&l, &[0.0; 4], &eta, lambda, rho, kappa).unwrap();
            let ln_det = build_a(&l, &eta, rho, kappa).unwrap().log_det().unwrap();
            // Gaussian integral of exp(-x^T A x / 2) is (2 pi)^{n/2} |A|^{-1/2}
            total += (at_zero + 0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * ln_det).exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn taylor_expansion_is_exact_at_its_center() {
        let l = build_layout(3, 3).unwrap();
        let mu: Vec<f64> = (0..12).map(|e| 0.1 + 0.07 * e as f64).collect();
        let exact = build_a(&l, &mu, 1.7, 0.4).unwrap().log_det().unwrap();
        let t = log_det_taylor(&l, &mu, 1.7, 0.4, &mu, 1.7, 0.4).unwrap();
        assert_eq!(t, exact);
        // first order: error shrinks quadratically
        let err = |s: f64| {
            let eta: Vec<f64> = mu.iter().map(|m| m + s * 0.1).collect();
            let (rho, kappa) = (1.7 * (s * 0.2).exp(), 0.4 * (-s * 0.3).exp());
            let approx = log_det_taylor(&l, &mu, 1.7, 0.4, &eta, rho, kappa).unwrap();
            (build_a(&l, &eta, rho, kappa).unwrap().log_det().unwrap() - approx).abs()
        };
        let ratio = err(1e-2) / err(1e-3);
        assert!((ratio - 100.0).abs() < 5.0, "ratio {ratio}");
    }

    #[test]
    fn saturated_lambda_turns_on_every_edge() {
        let l = build_layout(5, 5).unwrap();
        let s = sample_prior(&l, 40.0, 1.0, 1.0, 3).unwrap();
        assert!(s.eta.iter().all(|&h| h == 1.0));
        let s2 = sample_prior(&l, 40.0, 1.0, 1.0, 3).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn sample_covariance_approaches_inverse_precision() {
        let l = build_layout(3, 3).unwrap();
        let (rho, kappa) = (2.0, 0.5);
        let a = build_a(&l, &[1.0; 12], rho, kappa).unwrap();
        let (cov, _) = a.inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut acc = Mat::<f64>::zeros(9, 9);
        for _ in 0..n {
            let s = sample_prior_with(&l, 40.0, rho, kappa, &mut rng).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    acc[(i, j)] += s.x[i] * s.x[j];
                }
            }
        }
        let emp = acc * faer::Scale(1.0 / n as f64);
        for i in 0..9 {
            for j in 0..9 {
                // standard error of a sample second moment: sqrt((C_ii C_jj + C_ij^2) / n)
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 4.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn quadrupling_kappa_halves_spread() {
        let l = build_layout(4, 4).unwrap();
        let spread = |kappa: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut ss = 0.0;
            let draws = 4000;
            for _ in 0..draws {
                let s = sample_prior_with(&l, -40.0, 1.0, kappa, &mut rng).unwrap();
                ss += s.x.iter().map(|v| v * v).sum::<f64>();
            }
            (ss / (draws * 16) as f64).sqrt()
        };
        let ratio = spread(1.0) / spread(4.0);
        // identical seeds and eta = 0 make the draws exact multiples
        assert!((ratio - 2.0).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn edge_map_shapes() {
        let l = build_layout(4, 3).unwrap();
        let mu = LineProcessMeans::new((0..l.n_edges()).map(|e| if e < 9 { 1.0 } else { 0.0 }).collect()).unwrap();
        let (h, v) = edge_maps(&l, &mu).unwrap();
        assert_eq!((h.width(), h.height(), v.width(), v.height()), (3, 3, 4, 2));
        assert!(h.data().iter().all(|&p| p == 1.0));
        assert!(v.data().iter().all(|&p| p == -1.0));
    }
}

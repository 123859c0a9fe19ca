//! Special functions and distribution moments shared by the rest of the crate.
//!
//! The Jacobi theta function `theta3(u, q) = 1 + 2 sum_{n>=1} q^{n^2} cos(2 n pi u)`
//! is the exact lattice sum of a unit-spaced Gaussian, which is what makes the
//! PSF normalization in [`crate::obsmodel`] closed form.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Series terms below this magnitude are dropped.
const SERIES_FLOOR: f64 = 1e-16;

/// Hard cap on the number of series terms. Only reached for `q` within ~1e-6 of 1.
const MAX_TERMS: usize = 100_000;

/// Logistic sigmoid `1 / (1 + e^{-x})`, evaluated without overflow for large `|x|`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln logistic(x)`, accurate in both tails.
#[inline]
pub fn ln_logistic(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_nome(q: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("theta nome must lie in [0, 1), got {q}")));
    }
    Ok(())
}

/// Sums `sum_{n>=1} weight(n) q^{n^2} trig(2 n pi u)` until the term magnitude
/// (without the trig factor) drops below the floor.
fn theta_series(u: f64, q: f64, weight: impl Fn(f64) -> f64, trig: fn(f64) -> f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let ln_q = q.ln();
    let mut sum = 0.0;
    for n in 1..=MAX_TERMS {
        let nf = n as f64;
        let mag = weight(nf) * (nf * nf * ln_q).exp();
        if mag < SERIES_FLOOR {
            break;
        }
        sum += mag * trig(2.0 * nf * PI * u);
    }
    sum
}

/// Below this nome the q-series is used; above it the dual Gaussian lattice
/// sum, whose terms decay as `exp(-gamma k^2 / 2)` with `gamma = -2 pi^2 / ln q`.
/// At the switch both series shrink by `e^{-pi}` per step in `n^2`.
const DUAL_SWITCH: f64 = 0.043_213_918_263_772_25; // e^{-pi}

/// Terms of `sqrt(gamma / 2 pi) sum_k exp(-gamma (u - k)^2 / 2) * weight(u - k)`.
fn dual_series(u: f64, gamma: f64, weight: impl Fn(f64) -> f64) -> f64 {
    let amp = (gamma / (2.0 * PI)).sqrt();
    let base = u - u.round();
    let term = |d: f64| {
        let g = (-0.5 * gamma * d * d).exp();
        (g, g * weight(d))
    };
    let mut sum = term(base).1;
    for k in 1..=MAX_TERMS {
        let (gl, wl) = term(base - k as f64);
        let (gr, wr) = term(base + k as f64);
        sum += wl + wr;
        if gl + gr < SERIES_FLOOR * 1e-3 {
            break;
        }
    }
    amp * sum
}

#[inline]
fn dual_gamma(q: f64) -> f64 {
    -2.0 * PI * PI / q.ln()
}

/// Jacobi theta function `theta3(u, q)` with period 1 in `u`.
pub fn theta3(u: f64, q: f64) -> Result<f64> {
    check_nome(q)?;
    if q > DUAL_SWITCH {
        return Ok(dual_series(u, dual_gamma(q), |_| 1.0));
    }
    Ok(1.0 + theta_series(u, q, |_| 2.0, f64::cos))
}

/// Partial derivative of [`theta3`] with respect to `u`.
pub fn theta3_du(u: f64, q: f64) -> Result<f64> {
    check_nome(q)?;
    if q > DUAL_SWITCH {
        let gamma = dual_gamma(q);
        return Ok(dual_series(u, gamma, |d| -gamma * d));
    }
    Ok(-theta_series(u, q, |n| 4.0 * PI * n, f64::sin))
}

/// `q * d theta3 / d q = 2 sum n^2 q^{n^2} cos(2 n pi u)`.
///
/// The PSF precision enters through the nome `q = exp(-2 pi^2 / gamma)`, so
/// `d theta3 / d gamma = (2 pi^2 / gamma^2) * theta3_dlnq(u, q)`; this form stays
/// finite as `q -> 0`.
pub fn theta3_dlnq(u: f64, q: f64) -> Result<f64> {
    check_nome(q)?;
    if q > DUAL_SWITCH {
        let gamma = dual_gamma(q);
        let d_gamma = dual_series(u, gamma, |d| 0.5 / gamma - 0.5 * d * d);
        return Ok(gamma * gamma / (2.0 * PI * PI) * d_gamma);
    }
    Ok(theta_series(u, q, |n| 2.0 * n * n, f64::cos))
}

/// Shape/rate parameters of a gamma density `b^a / Gamma(a) x^{a-1} e^{-b x}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub a: f64,
    pub b: f64,
}

impl GammaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
            return Err(Error::Domain(format!(
                "gamma parameters must be positive and finite, got a={a}, b={b}"
            )));
        }
        Ok(Self { a, b })
    }

    #[inline]
    pub fn mean(&self) -> f64 {
        self.a / self.b
    }
}

/// Mean `a / b` of a gamma density.
#[inline]
pub fn gamma_mean(p: GammaParams) -> f64 {
    p.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Bilateral partial sum `sum_{n=-N}^{N} q^{n^2} cos(2 n pi u)`.
    fn theta3_bilateral(u: f64, q: f64, terms: i32) -> f64 {
        (-terms..=terms)
            .map(|n| q.powi(n * n) * (2.0 * n as f64 * PI * u).cos())
            .sum()
    }

    #[test]
    fn logistic_basics() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(40.0) - 1.0).abs() <= 1e-15);
        assert_relative_eq!(logistic(1.7) + logistic(-1.7), 1.0, epsilon = 1e-15);
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!(logistic(-1.0) < logistic(-0.5));
    }

    #[test]
    fn ln_logistic_tails() {
        assert_relative_eq!(ln_logistic(0.0), -(2f64.ln()), epsilon = 1e-15);
        assert_relative_eq!(ln_logistic(-800.0), -800.0, epsilon = 1e-12);
        assert_relative_eq!(ln_logistic(3.0), logistic(3.0).ln(), epsilon = 1e-15);
        assert_eq!(ln_logistic(f64::INFINITY), 0.0);
    }

    #[test]
    fn theta3_zero_nome() {
        assert_eq!(theta3(0.3, 0.0).unwrap(), 1.0);
        assert_eq!(theta3_du(0.3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn theta3_partial_sum_oracle() {
        let oracle = theta3_bilateral(0.0, 0.1, 10);
        // 1 + 2 (0.1 + 1e-4 + 1e-9 + 1e-16)
        assert_relative_eq!(oracle, 1.200_200_002_000_000_2, epsilon = 1e-15);
        assert!((theta3(0.0, 0.1).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn theta3_reference_values() {
        // Arbitrary-precision reference evaluations of theta3 and its u-derivative.
        let cases = [
            (0.25, 0.1, 0.9998, -1.256_637_023_736_81),
            (0.37, 0.2, 0.725_981_016_958_587, -1.791_977_255_239_99),
            (0.1, 0.8, 2.410_987_703_775_07, -21.327_521_868_327_8),
        ];
        for (u, q, t, dt) in cases {
            assert_relative_eq!(theta3(u, q).unwrap(), t, max_relative = 1e-13);
            assert_relative_eq!(theta3_du(u, q).unwrap(), dt, max_relative = 1e-12);
        }
    }

    #[test]
    fn theta3_periodic() {
        let a = theta3(0.37, 0.2).unwrap();
        let b = theta3(1.37, 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
        for q in [0.01, 0.3, 0.8, 0.95] {
            for k in 0..50 {
                let u = -3.0 + 0.123 * k as f64;
                let d = theta3(u, q).unwrap() - theta3(u + 1.0, q).unwrap();
                assert!(d.abs() < 1e-12, "u={u} q={q} diff={d}");
            }
        }
    }

    #[test]
    fn theta3_minimum_at_half_period() {
        for q in [0.01, 0.3, 0.8, 0.99] {
            let floor = theta3(0.5, q).unwrap();
            assert!(floor > 0.0);
            for k in 0..=100 {
                let u = k as f64 / 100.0;
                assert!(theta3(u, q).unwrap() >= floor - 1e-14);
            }
        }
    }

    #[test]
    fn theta3_du_special_points() {
        assert_eq!(theta3_du(0.0, 0.3).unwrap(), 0.0);
        assert!(theta3_du(0.5, 0.2).unwrap().abs() < 1e-14);
    }

    #[test]
    fn theta3_du_matches_finite_differences() {
        let h = 1e-6;
        let fd = |u: f64, q: f64| (theta3(u + h, q).unwrap() - theta3(u - h, q).unwrap()) / (2.0 * h);
        let d = theta3_du(0.25, 0.1).unwrap();
        assert!(((d - fd(0.25, 0.1)) / d).abs() <= 1e-6);

        for q in [0.01, 0.3, 0.8] {
            for k in 0..100 {
                let u = 0.005 + k as f64 / 100.0;
                let d = theta3_du(u, q).unwrap();
                let f = fd(u, q);
                let scale = d.abs().max(1e-3 * q);
                assert!(((d - f) / scale).abs() <= 1e-6, "u={u} q={q}: {d} vs {f}");
            }
        }
    }

    #[test]
    fn theta3_dlnq_matches_finite_differences() {
        for (u, q) in [(0.1, 0.2), (0.4, 0.6), (0.0, 0.01)] {
            let h = 1e-6 * q;
            let fd = q * (theta3(u, q + h).unwrap() - theta3(u, q - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(theta3_dlnq(u, q).unwrap(), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn series_branches_agree_at_switch() {
        let below = DUAL_SWITCH * (1.0 - 1e-12);
        let above = DUAL_SWITCH * (1.0 + 1e-12);
        for u in [0.0, 0.13, 0.5, 0.77] {
            assert!((theta3(u, below).unwrap() - theta3(u, above).unwrap()).abs() < 1e-12);
            assert!((theta3_du(u, below).unwrap() - theta3_du(u, above).unwrap()).abs() < 1e-11);
            assert!((theta3_dlnq(u, below).unwrap() - theta3_dlnq(u, above).unwrap()).abs() < 1e-11);
        }
    }

    #[test]
    fn theta3_near_unit_nome_stays_positive() {
        // gamma = 1000: the half-period value is ~exp(-125) relative to the peak
        let q = (-2.0 * PI * PI / 1000.0f64).exp();
        let peak = theta3(0.0, q).unwrap();
        assert_relative_eq!(peak, (1000.0 / (2.0 * PI)).sqrt(), max_relative = 1e-12);
        let half = theta3(0.5, q).unwrap();
        assert!(half > 0.0 && half < 1e-50);
    }

    #[test]
    fn theta3_rejects_bad_nome() {
        assert!(theta3(0.0, 1.0).is_err());
        assert!(theta3(0.0, -0.1).is_err());
        assert!(theta3_du(0.0, 1.5).is_err());
    }

    #[test]
    fn gamma_means() {
        assert_eq!(gamma_mean(GammaParams::new(1e-2, 1e-2).unwrap()), 1.0);
        assert_relative_eq!(gamma_mean(GammaParams::new(500.01, 250.005).unwrap()), 2.0);
        assert_eq!(gamma_mean(GammaParams::new(3.0, 4.0).unwrap()), 0.75);
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(GammaParams::new(1.0, -1.0).is_err());
    }
}

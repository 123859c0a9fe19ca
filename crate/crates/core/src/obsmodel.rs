//! Warp + blur + downsample observation model.
//!
//! Each low-resolution pixel `j` observes the high-resolution image through an
//! isotropic Gaussian PSF centered at `R(theta) (alpha zeta_j - o)`. The PSF is
//! normalized over the infinite unit lattice, which reduces to a product of two
//! `theta3` values per row, so pixels outside the high-resolution image simply
//! contribute luminance 0 and rows near the border sum to less than one.
//!
//! Because the Gaussian factorizes, every row of `W` is an outer product of a
//! horizontal and a vertical 1-D profile; derivatives are sums of two such
//! products.

use std::f64::consts::PI;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pixel_center, GrayImage};
use crate::mathcore::{theta3, theta3_dlnq, theta3_du};

/// Per-frame registration `[theta, o_h, o_v, gamma]`: rotation (radians),
/// translation (HR pixels) and PSF precision (HR pixels^-2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub theta: f64,
    pub o_h: f64,
    pub o_v: f64,
    pub gamma: f64,
}

impl RegistrationParams {
    pub fn new(theta: f64, o_h: f64, o_v: f64, gamma: f64) -> Result<Self> {
        let p = Self { theta, o_h, o_v, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self { theta: v[0], o_h: v[1], o_v: v[2], gamma: v[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.theta, self.o_h, self.o_v, self.gamma]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!("PSF precision must be positive, got {}", self.gamma)));
        }
        if !(self.theta.is_finite() && self.o_h.is_finite() && self.o_v.is_finite()) {
            return Err(Error::Domain("registration parameters must be finite".into()));
        }
        Ok(())
    }

    /// PSF standard deviation in HR pixels.
    pub fn sigma(&self) -> f64 {
        self.gamma.recip().sqrt()
    }
}

/// Gaussian prior on a frame's registration with independent components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationPrior {
    pub mean: [f64; 4],
    pub variance: [f64; 4],
}

impl RegistrationPrior {
    /// Rotation within ~1.8 degrees, translation within ~1 pixel, and a PSF
    /// whose precision `12 / alpha^2` matches the anti-aliasing width of the
    /// downsampling factor.
    pub fn for_alpha(alpha: f64) -> Self {
        Self { mean: [0.0, 0.0, 0.0, 12.0 / (alpha * alpha)], variance: [1e-3, 1.0, 1.0, 1e-3] }
    }
}

/// Geometry of the HR lattice and one LR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    hr_width: usize,
    hr_height: usize,
    lr_width: usize,
    lr_height: usize,
    alpha: f64,
}

impl GridSpec {
    /// `alpha = sqrt(N_x / N_y)`. `alpha = 1` is accepted as the degenerate
    /// pure-registration geometry; `alpha < 1` is rejected.
    pub fn new(hr_width: usize, hr_height: usize, lr_width: usize, lr_height: usize) -> Result<Self> {
        if hr_width == 0 || hr_height == 0 || lr_width == 0 || lr_height == 0 {
            return Err(Error::Dimension("grid dimensions must be nonzero".into()));
        }
        let n_x = (hr_width * hr_height) as f64;
        let n_y = (lr_width * lr_height) as f64;
        if n_y > n_x {
            return Err(Error::Dimension(format!(
                "LR frame {lr_width}x{lr_height} is larger than HR image {hr_width}x{hr_height}"
            )));
        }
        Ok(Self { hr_width, hr_height, lr_width, lr_height, alpha: (n_x / n_y).sqrt() })
    }

    /// Grid for an HR image downsampled by an integral-size factor.
    pub fn with_factor(hr_width: usize, hr_height: usize, alpha: f64) -> Result<Self> {
        let lr = |n: usize| -> Result<usize> {
            let v = n as f64 / alpha;
            if (v - v.round()).abs() > 1e-9 || v.round() < 1.0 {
                return Err(Error::Dimension(format!("HR size {n} is not divisible by {alpha}")));
            }
            Ok(v.round() as usize)
        };
        Self::new(hr_width, hr_height, lr(hr_width)?, lr(hr_height)?)
    }

    /// Same LR frame over an HR lattice extended by `margin` pixels on every side.
    /// The lattice, its origin and `alpha` are unchanged.
    pub fn padded(&self, margin: usize) -> Self {
        Self { hr_width: self.hr_width + 2 * margin, hr_height: self.hr_height + 2 * margin, ..*self }
    }

    pub fn hr_width(&self) -> usize {
        self.hr_width
    }
    pub fn hr_height(&self) -> usize {
        self.hr_height
    }
    pub fn lr_width(&self) -> usize {
        self.lr_width
    }
    pub fn lr_height(&self) -> usize {
        self.lr_height
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn n_x(&self) -> usize {
        self.hr_width * self.hr_height
    }
    pub fn n_y(&self) -> usize {
        self.lr_width * self.lr_height
    }

    /// Center `xi_i` of HR pixel `i`, as `[h, v]`.
    pub fn hr_center(&self, i: usize) -> [f64; 2] {
        [pixel_center(i % self.hr_width, self.hr_width), pixel_center(i / self.hr_width, self.hr_height)]
    }

    /// Center `zeta_j` of LR pixel `j`, as `[h, v]`, in LR pixel units.
    pub fn lr_center(&self, j: usize) -> [f64; 2] {
        [pixel_center(j % self.lr_width, self.lr_width), pixel_center(j / self.lr_width, self.lr_height)]
    }
}

/// `R(theta) (alpha zeta - o) - xi` with `R = [cos sin; -sin cos]`.
pub fn displacement(theta: f64, o: [f64; 2], alpha: f64, zeta: [f64; 2], xi: [f64; 2]) -> [f64; 2] {
    let c = psf_center(theta, o, alpha, zeta);
    [c[0] - xi[0], c[1] - xi[1]]
}

#[inline]
fn psf_center(theta: f64, o: [f64; 2], alpha: f64, zeta: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    let dh = alpha * zeta[0] - o[0];
    let dv = alpha * zeta[1] - o[1];
    [c * dh + s * dv, -s * dh + c * dv]
}

/// Dense `N_y x N_x` warp/blur/downsample matrix.
#[derive(Debug, Clone)]
pub struct TransformMatrix(Mat<f64>);

impl TransformMatrix {
    pub fn as_mat(&self) -> &Mat<f64> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.0[(j, i)]
    }

    pub fn row_sum(&self, j: usize) -> f64 {
        (0..self.0.ncols()).map(|i| self.0[(j, i)]).sum()
    }

    /// `W x` for an HR image stored row-major.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols(), "image length does not match W");
        let mut out = vec![0.0; self.nrows()];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let col = self.0.col(i);
                for (o, w) in out.iter_mut().zip(col.iter()) {
                    *o += w * xi;
                }
            }
        }
        out
    }
}

/// `W` together with its partial derivatives in `theta`, `o_h`, `o_v`, `gamma`.
#[derive(Debug, Clone)]
pub struct TransformJet {
    pub value: TransformMatrix,
    pub partials: [TransformMatrix; 4],
}

/// PSF lattice normalization for one LR row: `theta3(u_h, q) theta3(u_v, q)`
/// with `u = R(theta)(alpha zeta_j - o) - xi_i`. Independent of `i` up to
/// rounding because `theta3` has unit period.
pub fn psf_denominator(phi: &RegistrationParams, grid: &GridSpec, j: usize, i: usize) -> Result<f64> {
    phi.validate()?;
    let q = nome(phi.gamma);
    let chi = displacement(phi.theta, [phi.o_h, phi.o_v], grid.alpha, grid.lr_center(j), grid.hr_center(i));
    Ok(theta3(chi[0], q)? * theta3(chi[1], q)?)
}

#[inline]
fn nome(gamma: f64) -> f64 {
    (-2.0 * PI * PI / gamma).exp()
}

/// Normalized 1-D PSF profile along one axis of one row, plus its derivatives
/// with respect to the PSF center coordinate and to `gamma`.
struct AxisProfile {
    value: Vec<f64>,
    d_center: Vec<f64>,
    d_gamma: Vec<f64>,
}

fn axis_profile(center: f64, len: usize, gamma: f64, q: f64, derivatives: bool) -> Result<AxisProfile> {
    // the normalization is evaluated once, at the first lattice point
    let u0 = center - pixel_center(0, len);
    let t = theta3(u0, q)?;
    let amp = (gamma / (2.0 * PI)).sqrt();
    let mut value = Vec::with_capacity(len);
    let (mut d_center, mut d_gamma) = (Vec::new(), Vec::new());
    if derivatives {
        d_center.reserve(len);
        d_gamma.reserve(len);
    }
    let (t_u, t_gamma) = if derivatives {
        (theta3_du(u0, q)?, 2.0 * PI * PI / (gamma * gamma) * theta3_dlnq(u0, q)?)
    } else {
        (0.0, 0.0)
    };
    for k in 0..len {
        let u = center - pixel_center(k, len);
        let g = amp * (-0.5 * gamma * u * u).exp();
        value.push(g / t);
        if derivatives {
            d_center.push(-gamma * u * g / t - g * t_u / (t * t));
            d_gamma.push(g * (0.5 / gamma - 0.5 * u * u) / t - g * t_gamma / (t * t));
        }
    }
    Ok(AxisProfile { value, d_center, d_gamma })
}

/// Entries below this magnitude are stored as zero. Products of two retained
/// entries stay normal, so the dense algebra downstream never sees subnormals.
pub const FLUSH_BELOW: f64 = 1e-150;

#[inline]
fn flush(v: f64) -> f64 {
    if v.abs() < FLUSH_BELOW {
        0.0
    } else {
        v
    }
}

fn build(phi: &RegistrationParams, grid: &GridSpec, derivatives: bool) -> Result<(Mat<f64>, Option<[Mat<f64>; 4]>)> {
    phi.validate()?;
    let (n_y, n_x) = (grid.n_y(), grid.n_x());
    let (hw, hh) = (grid.hr_width, grid.hr_height);
    let q = nome(phi.gamma);
    let (s, c) = phi.theta.sin_cos();
    // d(center)/d(theta, o_h, o_v) for the [h, v] components
    let dc_do = [[-c, s], [-s, -c]];

    let mut w = Mat::<f64>::zeros(n_y, n_x);
    let mut dw: Option<[Mat<f64>; 4]> =
        derivatives.then(|| std::array::from_fn(|_| Mat::<f64>::zeros(n_y, n_x)));

    for j in 0..n_y {
        let center = psf_center(phi.theta, [phi.o_h, phi.o_v], grid.alpha, grid.lr_center(j));
        let ph = axis_profile(center[0], hw, phi.gamma, q, derivatives)?;
        let pv = axis_profile(center[1], hh, phi.gamma, q, derivatives)?;
        let dc_dtheta = [center[1], -center[0]];
        for r in 0..hh {
            for col in 0..hw {
                let i = r * hw + col;
                w[(j, i)] = flush(ph.value[col] * pv.value[r]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let d_dir = |m: &mut Mat<f64>, dh: f64, dv: f64| {
                for r in 0..hh {
                    for col in 0..hw {
                        m[(j, r * hw + col)] =
                            flush(ph.d_center[col] * dh * pv.value[r] + ph.value[col] * pv.d_center[r] * dv);
                    }
                }
            };
            let [d_theta, d_oh, d_ov, d_gamma] = dw;
            d_dir(d_theta, dc_dtheta[0], dc_dtheta[1]);
            d_dir(d_oh, dc_do[0][0], dc_do[0][1]);
            d_dir(d_ov, dc_do[1][0], dc_do[1][1]);
            for r in 0..hh {
                for col in 0..hw {
                    d_gamma[(j, r * hw + col)] = flush(ph.d_gamma[col] * pv.value[r] + ph.value[col] * pv.d_gamma[r]);
                }
            }
        }
    }
    Ok((w, dw))
}

/// Transformation matrix `W(phi)` for one frame.
pub fn build_w(phi: &RegistrationParams, grid: &GridSpec) -> Result<TransformMatrix> {
    Ok(TransformMatrix(build(phi, grid, false)?.0))
}

/// The four partials `dW/dtheta`, `dW/do_h`, `dW/do_v`, `dW/dgamma`.
pub fn build_w_derivatives(phi: &RegistrationParams, grid: &GridSpec) -> Result<[TransformMatrix; 4]> {
    Ok(build_w_jet(phi, grid)?.partials)
}

/// `W(phi)` and all four partials in one pass.
pub fn build_w_jet(phi: &RegistrationParams, grid: &GridSpec) -> Result<TransformJet> {
    let (w, dw) = build(phi, grid, true)?;
    let partials = dw.expect("derivatives requested").map(TransformMatrix);
    Ok(TransformJet { value: TransformMatrix(w), partials })
}

/// Pooled population variance of a set of frames.
pub fn pooled_variance(frames: &[GrayImage]) -> f64 {
    let n: usize = frames.iter().map(|f| f.len()).sum();
    let mean = frames.iter().flat_map(|f| f.data()).sum::<f64>() / n as f64;
    frames.iter().flat_map(|f| f.data()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Noise precision giving the requested SNR (dB) relative to the pooled
/// variance of the noiseless frames.
pub fn snr_to_beta(clean_frames: &[GrayImage], snr_db: f64) -> Result<f64> {
    if clean_frames.is_empty() {
        return Err(Error::Dimension("empty frame stack".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("SNR must be finite, got {snr_db}")));
    }
    let var = pooled_variance(clean_frames);
    if var <= 0.0 {
        return Err(Error::Domain("noiseless frames have zero variance".into()));
    }
    Ok(10f64.powf(snr_db / 10.0) / var)
}

/// A simulated observation stack with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticStack {
    pub grid: GridSpec,
    pub frames: Vec<GrayImage>,
    pub noiseless: Vec<GrayImage>,
    pub registrations: Vec<RegistrationParams>,
    pub beta: f64,
}

/// Smallest PSF precision the simulator will emit.
pub const MIN_SIMULATED_GAMMA: f64 = 1e-3;

/// Draw `frames` registrations from `prior`, render `W(phi_l) x`, and add white
/// Gaussian noise at `snr_db`. Deterministic in `seed`.
pub fn synthesize_observations(
    x: &GrayImage,
    alpha: f64,
    frames: usize,
    snr_db: f64,
    prior: &RegistrationPrior,
    seed: u64,
) -> Result<SyntheticStack> {
    if frames == 0 {
        return Err(Error::Dimension("need at least one frame".into()));
    }
    let grid = GridSpec::with_factor(x.width(), x.height(), alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registrations: Vec<RegistrationParams> = (0..frames)
        .map(|_| {
            let mut v = [0.0; 4];
            for k in 0..4 {
                let z: f64 = rng.sample(StandardNormal);
                v[k] = prior.mean[k] + prior.variance[k].sqrt() * z;
            }
            v[3] = v[3].max(MIN_SIMULATED_GAMMA);
            RegistrationParams::from_array(v)
        })
        .collect();
    let noiseless = registrations
        .iter()
        .map(|phi| {
            let w = build_w(phi, &grid)?;
            GrayImage::new(grid.lr_width, grid.lr_height, w.apply(x.data()))
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = snr_to_beta(&noiseless, snr_db)?;
    let sd = beta.recip().sqrt();
    let frames = noiseless
        .iter()
        .map(|clean| {
            let noisy = clean
                .data()
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + sd * z
                })
                .collect();
            GrayImage::new(clean.width(), clean.height(), noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticStack { grid, frames, noiseless, registrations, beta })
}

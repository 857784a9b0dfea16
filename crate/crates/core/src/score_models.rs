//! Epsilon-prediction models with exact input gradients.
//!
//! A model predicts the noise `ε(x_t, t)` added by the forward process and can
//! pull a cotangent back through that prediction (`vᵀ ∂ε/∂x`). The Gaussian
//! mixture is closed under diffusion, so its epsilon and Jacobian are exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::schedule::NoiseSchedule;

pub trait EpsModel: Send + Sync {
    fn dim(&self) -> usize;

    fn eps(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>>;

    /// `vᵀ · ∂ε/∂x` at `(x, t)`.
    fn eps_vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eps(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        (**self).eps(schedule, x, t)
    }
    fn eps_vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).eps_vjp(schedule, x, t, v)
    }
}

/// Tweedie estimate `x̂₀ = (x_t − sqrt(1−ᾱ_t)·ε) / sqrt(ᾱ_t)` for a given epsilon.
pub fn denoise(schedule: &NoiseSchedule, x_t: &DVector<f64>, eps: &DVector<f64>, t: usize) -> DVector<f64> {
    let ab = schedule.alpha_bar(t);
    (x_t - eps * (1.0 - ab).sqrt()) / ab.sqrt()
}

pub fn tweedie_denoise<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    let eps = model.eps(schedule, x_t, t)?;
    Ok(denoise(schedule, x_t, &eps, t))
}

/// The model that always predicts zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEps {
    pub dim: usize,
}

impl EpsModel for ZeroEps {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eps(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        ensure_dim(self.dim, x.len())?;
        Ok(DVector::zeros(self.dim))
    }
    fn eps_vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        ensure_dim(self.dim, x.len())?;
        ensure_dim(self.dim, v.len())?;
        Ok(DVector::zeros(self.dim))
    }
}

/// Isotropic Gaussian mixture over clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<f64>,
}

/// Per-component quantities of the diffused mixture at one point.
struct Diffused {
    resp: Vec<f64>,
    /// `(sqrt(ᾱ)·μ_k − x) / s_k²`
    pulls: Vec<DVector<f64>>,
    inv_var: Vec<f64>,
    log_density: f64,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidModel("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::InvalidModel(format!(
                "component count mismatch: {k} weights, {} means, {} variances",
                means.len(),
                variances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidModel("zero-dimensional means".into()));
        }
        for m in &means {
            ensure_dim(d, m.len())?;
            ensure_finite(m, "mixture mean")?;
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidModel("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidModel("variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn single(mean: DVector<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Mixture whose weights are tilted toward `class`: `κ·δ_class + (1−κ)·w`.
    pub fn conditioned(&self, class: usize, kappa: f64) -> Result<Self> {
        if class >= self.components() {
            return Err(Error::InvalidModel(format!("no component {class}")));
        }
        if !(0.0..1.0).contains(&kappa) {
            return Err(Error::InvalidModel(format!(
                "conditioning strength {kappa} not in [0, 1)"
            )));
        }
        let mut weights: Vec<f64> = self.weights.iter().map(|w| (1.0 - kappa) * w).collect();
        weights[class] += kappa;
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(weights, self.means.clone(), self.variances.clone())
    }

    /// Push the mixture through a linear map with orthonormal rows.
    pub fn encoded(&self, codec: &LatentCodec) -> Result<Self> {
        let means = self.means.iter().map(|m| codec.encode(m)).collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), means, self.variances.clone())
    }

    fn diffused(&self, alpha_bar: f64, x: &DVector<f64>) -> Result<Diffused> {
        ensure_dim(self.means[0].len(), x.len())?;
        ensure_finite(x, "mixture input")?;
        let d = x.len() as f64;
        let scale = alpha_bar.sqrt();
        let k = self.components();
        let mut logits = Vec::with_capacity(k);
        let mut pulls = Vec::with_capacity(k);
        let mut inv_var = Vec::with_capacity(k);
        for i in 0..k {
            let var = alpha_bar * self.variances[i] + (1.0 - alpha_bar);
            let diff = &self.means[i] * scale - x;
            let logit = self.weights[i].ln()
                - 0.5 * diff.norm_squared() / var
                - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
            logits.push(logit);
            pulls.push(diff / var);
            inv_var.push(1.0 / var);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        Ok(Diffused {
            resp,
            pulls,
            inv_var,
            log_density: max + z.ln(),
        })
    }

    /// `log p_t(x)` of the diffused mixture; `t = 0` is the clean density.
    pub fn log_density(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<f64> {
        Ok(self.diffused(self.alpha_bar_at(schedule, t)?, x)?.log_density)
    }

    /// `∇ log p_t(x)`.
    pub fn score(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let parts = self.diffused(self.alpha_bar_at(schedule, t)?, x)?;
        Ok(weighted_pull(&parts))
    }

    /// Posterior component probabilities under the diffused mixture at step `t`.
    pub fn responsibilities(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<Vec<f64>> {
        Ok(self.diffused(self.alpha_bar_at(schedule, t)?, x)?.resp)
    }

    /// Responsibilities under the clean (`t = 0`) mixture.
    pub fn clean_responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.diffused(1.0, x)?.resp)
    }

    fn alpha_bar_at(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        if t > schedule.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: schedule.steps(),
            });
        }
        Ok(schedule.alpha_bar(t))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DVector<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (k, self.sample_component(k, rng))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let sd = self.variances[k].sqrt();
        let mean = &self.means[k];
        DVector::from_fn(mean.len(), |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            mean[i] + sd * z
        })
    }
}

fn weighted_pull(parts: &Diffused) -> DVector<f64> {
    let mut out = DVector::zeros(parts.pulls[0].len());
    for (r, g) in parts.resp.iter().zip(&parts.pulls) {
        out.axpy(*r, g, 1.0);
    }
    out
}

impl EpsModel for GmmModel {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn eps(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let parts = self.diffused(ab, x)?;
        Ok(weighted_pull(&parts) * (-(1.0 - ab).sqrt()))
    }

    fn eps_vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        ensure_dim(self.dim(), v.len())?;
        ensure_finite(v, "cotangent")?;
        let ab = schedule.alpha_bar(t);
        let parts = self.diffused(ab, x)?;
        // Hessian of log p_t applied to v:
        //   −Σ r_k v / s_k² + Σ r_k g_k (g_k·v) − ḡ (ḡ·v)
        let mean_pull = weighted_pull(&parts);
        let mut hv = DVector::zeros(v.len());
        for ((r, g), iv) in parts.resp.iter().zip(&parts.pulls).zip(&parts.inv_var) {
            hv.axpy(-r * iv, v, 1.0);
            hv.axpy(r * g.dot(v), g, 1.0);
        }
        hv.axpy(-mean_pull.dot(v), &mean_pull, 1.0);
        // ∂ε/∂x = −sqrt(1−ᾱ)·H is symmetric, so the VJP is a plain product.
        Ok(hv * (-(1.0 - ab).sqrt()))
    }
}

/// Linear encoder with orthonormal rows; the decoder is its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    encode: DMatrix<f64>,
    identity: bool,
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        Self {
            encode: DMatrix::identity(dim, dim),
            identity: true,
        }
    }

    /// Random orthonormal `m × d` encoder drawn from `seed`.
    pub fn random(data_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > data_dim {
            return Err(Error::InvalidModel(format!(
                "latent dimension {latent_dim} must lie in 1..={data_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(data_dim, latent_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let q = g.qr().q();
        Ok(Self {
            encode: q.transpose(),
            identity: false,
        })
    }

    pub fn from_matrix(encode: DMatrix<f64>) -> Result<Self> {
        let gram = &encode * encode.transpose();
        let id = DMatrix::<f64>::identity(encode.nrows(), encode.nrows());
        if (gram - id).amax() > 1e-10 {
            return Err(Error::InvalidModel("encoder rows are not orthonormal".into()));
        }
        Ok(Self {
            encode,
            identity: false,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.encode.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.encode.nrows()
    }

    pub fn encode_matrix(&self) -> &DMatrix<f64> {
        &self.encode
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.data_dim(), x.len())?;
        if self.identity {
            return Ok(x.clone());
        }
        Ok(&self.encode * x)
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.latent_dim(), z.len())?;
        if self.identity {
            return Ok(z.clone());
        }
        Ok(self.encode.tr_mul(z))
    }
}

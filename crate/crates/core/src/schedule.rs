//! Discrete diffusion time grid and its coefficients.
//!
//! Timesteps are 1-indexed, `t ∈ 1..=T`, and `t = 0` denotes clean data with
//! the boundary convention `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta ramp over `T` native steps with the DDIM stochasticity scale `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[0] == 1.0`, `alpha_bars[t]` for `t ∈ 1..=T`.
    alpha_bars: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidSchedule(format!("eta must lie in [0, 1], got {eta}")));
        }
        let span = beta_end - beta_start;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            eta,
        })
    }

    /// Same coefficients, different stochasticity scale.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidSchedule(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(Self { eta, ..self.clone() })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// DDIM standard deviation at step `t` under this schedule's `eta`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.sigma_with_eta(t, self.eta)
    }

    pub fn sigma_with_eta(&self, t: usize, eta: f64) -> Result<f64> {
        self.check(t, 1)?;
        if eta == 0.0 {
            return Ok(0.0);
        }
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        Ok(eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt())
    }

    /// Coefficient of the noise direction, `sqrt(1 - alpha_bar_{t-1} - sigma^2)`.
    pub fn direction_coef(&self, t: usize, sigma: f64) -> Result<f64> {
        self.check(t, 1)?;
        let budget = 1.0 - self.alpha_bars[t - 1];
        let sigma_sq = sigma * sigma;
        let rem = budget - sigma_sq;
        if rem < 0.0 {
            // Allow round-off when sigma is at its eta = 1 ceiling.
            if rem > -1e-14 {
                return Ok(0.0);
            }
            return Err(Error::NoiseBudgetExceeded { t, sigma_sq, budget });
        }
        Ok(rem.sqrt())
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        self.check(t, 1)
    }
}

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::guidance::adam::Adam;
use crate::guidance::loss::{LossParts, Objective, TotalLoss};
use crate::schedule::NoiseSchedule;
use crate::score_models::{denoise, EpsModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Mcg,
    EpsPerturb,
    DdsOnly,
    Agg,
    SymmetricAblation,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::Mcg,
        Strategy::EpsPerturb,
        Strategy::DdsOnly,
        Strategy::Agg,
        Strategy::SymmetricAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Mcg => "mcg",
            Strategy::EpsPerturb => "eps_perturb",
            Strategy::DdsOnly => "dds_only",
            Strategy::Agg => "agg",
            Strategy::SymmetricAblation => "symmetric_ablation",
        }
    }

    /// Whether the strategy evaluates the one-step backpropagated gradient.
    pub fn uses_mcg_gradient(self) -> bool {
        matches!(
            self,
            Strategy::Mcg | Strategy::EpsPerturb | Strategy::Agg | Strategy::SymmetricAblation
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Scale of the epsilon perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SRule {
    SqrtOneMinusAlphaBar,
    Constant(f64),
}

impl SRule {
    pub fn value(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            SRule::SqrtOneMinusAlphaBar => (1.0 - schedule.alpha_bar(t)).sqrt(),
            SRule::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub strategy: Strategy,
    pub lambda_sty: f64,
    pub lambda_reg: f64,
    pub s_rule: SRule,
    pub t_edit: usize,
    pub dds_steps: usize,
    pub dds_lr: f64,
    pub resample_period: Option<usize>,
    pub lambda_i: f64,
    pub lambda_s: f64,
    pub lambda_mse: f64,
    /// Use `ε − s·g` instead of the descent convention `ε + s·g`.
    pub flip_sign: bool,
    /// Step multiplier for the plain gradient branch (`mcg`).
    pub mcg_scale: f64,
}

impl GuidanceConfig {
    pub fn image_defaults() -> Self {
        Self {
            strategy: Strategy::Agg,
            lambda_sty: 200.0,
            lambda_reg: 200.0,
            s_rule: SRule::SqrtOneMinusAlphaBar,
            t_edit: 20,
            dds_steps: 2,
            dds_lr: 0.02,
            resample_period: None,
            lambda_i: 0.0,
            lambda_s: 0.0,
            lambda_mse: 0.0,
            flip_sign: false,
            mcg_scale: 1.0,
        }
    }

    pub fn latent_defaults() -> Self {
        Self {
            lambda_sty: 0.0,
            lambda_reg: 0.1,
            t_edit: 40,
            dds_steps: 10,
            dds_lr: 0.01,
            ..Self::image_defaults()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_edit > steps {
            return Err(Error::Config(format!("t_edit = {} exceeds T = {steps}", self.t_edit)));
        }
        let weights = [
            ("lambda_sty", self.lambda_sty),
            ("lambda_reg", self.lambda_reg),
            ("lambda_i", self.lambda_i),
            ("lambda_s", self.lambda_s),
            ("lambda_mse", self.lambda_mse),
            ("mcg_scale", self.mcg_scale),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative weight, got {w}"
                )));
            }
        }
        if !(self.dds_lr > 0.0 && self.dds_lr.is_finite()) {
            return Err(Error::Config(format!("dds_lr must be positive, got {}", self.dds_lr)));
        }
        if self.resample_period == Some(0) {
            return Err(Error::Config("resample_period must be at least 1".into()));
        }
        if let SRule::Constant(c) = self.s_rule {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("constant s_t must be non-negative, got {c}")));
            }
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::image_defaults()
    }
}

/// Gradient of `x_t ↦ ℓ(x̂₀,t(x_t))`, returned with the loss value.
pub fn loss_grad_wrt_xt<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    loss: &dyn Objective,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<(f64, DVector<f64>)> {
    let eps = model.eps(schedule, x_t, t)?;
    chain_through_denoiser(model, schedule, loss, x_t, &eps, t)
}

fn chain_through_denoiser<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    loss: &dyn Objective,
    x_t: &DVector<f64>,
    eps: &DVector<f64>,
    t: usize,
) -> Result<(f64, DVector<f64>)> {
    let ab = schedule.alpha_bar(t);
    let x_hat = denoise(schedule, x_t, eps, t);
    let (value, g0) = loss.value_and_gradient(&x_hat)?;
    let back = model.eps_vjp(schedule, x_t, t, &g0)?;
    let grad = (g0 - back * (1.0 - ab).sqrt()) / ab.sqrt();
    ensure_finite(&grad, "loss gradient")?;
    Ok((value, grad))
}

/// `ε + s·g`. The denoised estimate then moves by `−s·sqrt((1−ᾱ)/ᾱ)·g`.
pub fn perturb_eps(eps: &DVector<f64>, grad: &DVector<f64>, s: f64) -> DVector<f64> {
    eps + grad * s
}

/// Replaces the current clean estimate by a reverse-then-forward round trip.
pub trait ResampleHook {
    fn resample(&self, x0: &DVector<f64>) -> Result<DVector<f64>>;
}

/// One deterministic reverse step from `t` followed by one inversion step back to `t`.
pub struct DdimResampler<'a, M: ?Sized> {
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
    pub t: usize,
    pub eps: &'a DVector<f64>,
}

impl<M: EpsModel + ?Sized> ResampleHook for DdimResampler<'_, M> {
    fn resample(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        let ab_prev = self.schedule.alpha_bar(self.t - 1);
        if ab_prev >= 1.0 {
            return Ok(x0.clone());
        }
        let x_prev = x0 * ab_prev.sqrt() + self.eps * (1.0 - ab_prev).sqrt();
        let eps = self.model.eps(self.schedule, &x_prev, self.t)?;
        let out = (x_prev - eps * (1.0 - ab_prev).sqrt()) / ab_prev.sqrt();
        ensure_finite(&out, "resampled estimate")?;
        Ok(out)
    }
}

/// DDS inner loop: minimize `ℓ(x̄ + Δ)` over `Δ` with Adam, returning the best iterate seen.
pub fn dds_refine(
    loss: &dyn Objective,
    x_bar: &DVector<f64>,
    cfg: &GuidanceConfig,
    hook: Option<&dyn ResampleHook>,
) -> Result<DVector<f64>> {
    if cfg.dds_steps == 0 {
        return Ok(x_bar.clone());
    }
    let period = match (cfg.resample_period, hook) {
        (Some(p), Some(_)) => p,
        _ => cfg.dds_steps,
    };
    let mut x = x_bar.clone();
    let (mut value, mut grad) = loss.value_and_gradient(&x)?;
    if !value.is_finite() {
        return Err(Error::OptimizerDiverged { step: 0 });
    }
    let mut best = x.clone();
    let mut best_value = value;
    let mut adam = Adam::new(x.len(), cfg.dds_lr);
    for step in 1..=cfg.dds_steps {
        adam.step(x.as_mut_slice(), grad.as_slice());
        if step % period == 0 && step < cfg.dds_steps {
            if let Some(h) = hook {
                x = h.resample(&x)?;
                adam = Adam::new(x.len(), cfg.dds_lr);
            }
        }
        (value, grad) = loss.value_and_gradient(&x)?;
        if !value.is_finite() {
            return Err(Error::OptimizerDiverged { step });
        }
        if value < best_value {
            best_value = value;
            best.copy_from(&x);
        }
    }
    Ok(best)
}

/// Everything one guided step hands to the reverse update.
#[derive(Debug, Clone)]
pub struct GuidedStep {
    /// `ε_θ(x_t, t)`.
    pub eps: DVector<f64>,
    /// `x̂₀,t(ε)`.
    pub x_hat: DVector<f64>,
    /// Guided denoised estimate for the Denoise term.
    pub x_hat_prime: DVector<f64>,
    /// Epsilon for the noise-direction term.
    pub noise_eps: DVector<f64>,
    pub grad_norm: f64,
    pub loss_before: LossParts,
    pub loss_after: LossParts,
}

/// Guided denoised estimate at step `t` for the configured strategy.
#[allow(clippy::too_many_arguments)]
pub fn agg_update<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    loss: &TotalLoss<'_>,
    x_t: &DVector<f64>,
    t: usize,
    cfg: &GuidanceConfig,
    resample: bool,
) -> Result<GuidedStep> {
    ensure_dim(model.dim(), x_t.len())?;
    schedule.check_step(t)?;
    let eps = model.eps(schedule, x_t, t)?;
    let x_hat = denoise(schedule, x_t, &eps, t);
    let loss_before = loss.parts(&x_hat)?;

    let (grad, grad_norm) = if cfg.strategy.uses_mcg_gradient() {
        let (_, g) = chain_through_denoiser(model, schedule, loss, x_t, &eps, t)?;
        let n = g.norm();
        (Some(g), n)
    } else {
        (None, 0.0)
    };
    let perturbed = |g: &DVector<f64>| {
        let s = cfg.s_rule.value(schedule, t);
        let s = if cfg.flip_sign { -s } else { s };
        perturb_eps(&eps, g, s)
    };
    let refine = |start: &DVector<f64>, eps_ref: &DVector<f64>| -> Result<DVector<f64>> {
        if resample && cfg.resample_period.is_some() {
            let hook = DdimResampler {
                model,
                schedule,
                t,
                eps: eps_ref,
            };
            dds_refine(loss, start, cfg, Some(&hook))
        } else {
            dds_refine(loss, start, cfg, None)
        }
    };

    let (x_hat_prime, noise_eps) = match (cfg.strategy, grad.as_ref()) {
        (Strategy::None, _) => (x_hat.clone(), eps.clone()),
        (Strategy::Mcg, Some(g)) => (&x_hat - g * cfg.mcg_scale, eps.clone()),
        (Strategy::EpsPerturb, Some(g)) => (denoise(schedule, x_t, &perturbed(g), t), eps.clone()),
        (Strategy::DdsOnly, _) => (refine(&x_hat, &eps)?, eps.clone()),
        (Strategy::Agg, Some(g)) => {
            let e = perturbed(g);
            (refine(&denoise(schedule, x_t, &e, t), &eps)?, eps.clone())
        }
        (Strategy::SymmetricAblation, Some(g)) => {
            let e = perturbed(g);
            (refine(&denoise(schedule, x_t, &e, t), &e)?, e)
        }
        _ => unreachable!("gradient computed for every strategy that needs one"),
    };
    ensure_finite(&x_hat_prime, "guided estimate")?;
    let loss_after = loss.parts(&x_hat_prime)?;
    Ok(GuidedStep {
        eps,
        x_hat,
        x_hat_prime,
        noise_eps,
        grad_norm,
        loss_before,
        loss_after,
    })
}

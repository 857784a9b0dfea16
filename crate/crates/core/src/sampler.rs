//! Forward DDIM inversion, guided reverse sampling and the plain baselines.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::guidance::{agg_update, Decoded, GuidanceConfig, Objective, Strategy, TotalLoss};
use crate::schedule::NoiseSchedule;
use crate::score_models::{denoise, EpsModel, LatentCodec};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine integers into one well-mixed 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Gaussian draws addressed by `(seed, trajectory, index)`.
///
/// Each index gets its own ChaCha stream, so a draw never depends on which
/// other indices were consumed before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    key: u64,
}

const INVERSION_OFFSET: u64 = 1 << 32;
const PRIOR_INDEX: u64 = 1 << 33;

impl NoiseStream {
    pub fn new(seed: u64, trajectory: u64) -> Self {
        Self {
            key: splitmix(splitmix(seed) ^ trajectory),
        }
    }

    pub fn draw(&self, index: u64, dim: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(index);
        DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
    }

    /// Draw for the reverse step at `t`.
    pub fn reverse(&self, t: usize, dim: usize) -> DVector<f64> {
        self.draw(t as u64, dim)
    }

    fn inversion(&self, t: usize, dim: usize) -> DVector<f64> {
        self.draw(INVERSION_OFFSET + t as u64, dim)
    }

    fn prior(&self, dim: usize) -> DVector<f64> {
        self.draw(PRIOR_INDEX, dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// `x̂*₀,t`.
    pub x_hat: DVector<f64>,
    /// `ε*_t`.
    pub eps: DVector<f64>,
    /// `x*_t`.
    pub x_t: DVector<f64>,
}

/// Write-once store of forward-pass estimates for `t ∈ (T − window, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCache {
    steps: usize,
    window: usize,
    entries: Vec<Option<CacheEntry>>,
}

impl TrajectoryCache {
    pub fn new(steps: usize, window: usize) -> Result<Self> {
        if window > steps {
            return Err(Error::Config(format!("cache window {window} exceeds T = {steps}")));
        }
        Ok(Self {
            steps,
            window,
            entries: vec![None; window],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn covers(&self, t: usize) -> bool {
        t <= self.steps && t + self.window > self.steps
    }

    fn slot(&self, t: usize) -> Option<usize> {
        self.covers(t).then(|| self.steps - t)
    }

    pub fn insert(&mut self, t: usize, entry: CacheEntry) -> Result<()> {
        let i = self.slot(t).ok_or(Error::TimestepOutOfRange {
            t,
            lo: self.steps - self.window + 1,
            hi: self.steps,
        })?;
        if self.entries[i].is_some() {
            return Err(Error::CacheEntryExists(t));
        }
        self.entries[i] = Some(entry);
        Ok(())
    }

    pub fn get(&self, t: usize) -> Result<&CacheEntry> {
        self.slot(t)
            .and_then(|i| self.entries[i].as_ref())
            .ok_or(Error::MissingCacheEntry(t))
    }

    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in decreasing `t`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &CacheEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (self.steps - i, e)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// `x*_0 ..= x*_T`.
    pub path: Vec<DVector<f64>>,
    pub cache: TrajectoryCache,
}

impl Inversion {
    pub fn x_final(&self) -> &DVector<f64> {
        self.path.last().expect("path holds x*_0")
    }
}

/// Deterministic DDIM inversion from clean data to `x*_T`.
///
/// The step `t−1 → t` evaluates `ε = ε(x*_{t−1}, t)`, forms
/// `x̂ = (x*_{t−1} − sqrt(1−ᾱ_{t−1})ε)/sqrt(ᾱ_{t−1})` and sets
/// `x*_t = sqrt(ᾱ_t)x̂ + sqrt(1−ᾱ_t)ε`, so a σ = 0 reverse step fed the
/// cached pair lands back on `x*_{t−1}`.
pub fn ddim_forward_invert<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_src: &DVector<f64>,
    window: usize,
) -> Result<Inversion> {
    invert_impl(model, schedule, x_src, window, None)
}

/// Inversion with a `σ_t·z` term added to each forward step.
pub fn stochastic_forward_invert<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_src: &DVector<f64>,
    window: usize,
    noise: &NoiseStream,
) -> Result<Inversion> {
    invert_impl(model, schedule, x_src, window, Some(noise))
}

fn invert_impl<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_src: &DVector<f64>,
    window: usize,
    noise: Option<&NoiseStream>,
) -> Result<Inversion> {
    ensure_dim(model.dim(), x_src.len())?;
    ensure_finite(x_src, "source point")?;
    let steps = schedule.steps();
    let mut cache = TrajectoryCache::new(steps, window)?;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x_src.clone());
    for t in 1..=steps {
        let prev = &path[t - 1];
        let ab_prev = schedule.alpha_bar(t - 1);
        let ab = schedule.alpha_bar(t);
        let eps = model.eps(schedule, prev, t)?;
        let x_hat = (prev - &eps * (1.0 - ab_prev).sqrt()) / ab_prev.sqrt();
        let x_t = match noise {
            None => &x_hat * ab.sqrt() + &eps * (1.0 - ab).sqrt(),
            Some(n) => {
                let sigma = schedule.sigma(t)?;
                let c = (1.0 - ab - sigma * sigma).max(0.0).sqrt();
                &x_hat * ab.sqrt() + &eps * c + n.inversion(t, x_src.len()) * sigma
            }
        };
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("inversion state at t = {t}"),
            });
        }
        if cache.covers(t) {
            cache.insert(
                t,
                CacheEntry {
                    x_hat,
                    eps,
                    x_t: x_t.clone(),
                },
            )?;
        }
        path.push(x_t);
    }
    Ok(Inversion { path, cache })
}

/// `sqrt(ᾱ_{t−1})·x̂′ + sqrt(1−ᾱ_{t−1}−σ²)·ε + σ·z`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    t: usize,
    x_hat_prime: &DVector<f64>,
    noise_eps: &DVector<f64>,
    sigma: f64,
    z: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let ab_prev = schedule.alpha_bar(t - 1);
    let c = schedule.direction_coef(t, sigma)?;
    let mut out = x_hat_prime * ab_prev.sqrt() + noise_eps * c;
    if sigma != 0.0 {
        let z = z.ok_or_else(|| Error::Config(format!("step {t} has sigma > 0 but no noise draw")))?;
        out.axpy(sigma, z, 1.0);
    }
    Ok(out)
}

/// One reverse step. Without a guided estimate this is plain DDIM.
pub fn reverse_step<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
    x_hat_prime: Option<&DVector<f64>>,
    z: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    let eps = model.eps(schedule, x_t, t)?;
    let sigma = schedule.sigma(t)?;
    match x_hat_prime {
        Some(x) => ddim_update(schedule, t, x, &eps, sigma, z),
        None => ddim_update(schedule, t, &denoise(schedule, x_t, &eps, t), &eps, sigma, z),
    }
}

/// σ = 0 reverse step driven entirely by the cached pair at `t`.
pub fn cached_reverse_step(schedule: &NoiseSchedule, cache: &TrajectoryCache, t: usize) -> Result<DVector<f64>> {
    let e = cache.get(t)?;
    ddim_update(schedule, t, &e.x_hat, &e.eps, 0.0, None)
}

/// Mask-dependent guidance phases.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSchedule {
    pub t_edit1: usize,
    pub t_edit2: usize,
    pub mask: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Guided,
    Blended,
    Free,
}

impl EditSchedule {
    /// No mask: guidance window comes from `t_edit` alone.
    pub fn unmasked() -> Self {
        Self {
            t_edit1: 0,
            t_edit2: 0,
            mask: None,
        }
    }

    pub fn masked(t_edit1: usize, t_edit2: usize, mask: DVector<f64>) -> Self {
        Self {
            t_edit1,
            t_edit2,
            mask: Some(mask),
        }
    }

    pub fn validate(&self, steps: usize, dim: usize) -> Result<()> {
        if let Some(m) = &self.mask {
            if !(self.t_edit1 <= self.t_edit2 && self.t_edit2 <= steps) {
                return Err(Error::Config(format!(
                    "need t_edit1 <= t_edit2 <= T, got {} / {} / {steps}",
                    self.t_edit1, self.t_edit2
                )));
            }
            ensure_dim(dim, m.len())?;
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("mask weights must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Steps that need a cache entry.
    pub fn window(&self, t_edit: usize) -> usize {
        if self.mask.is_some() {
            self.t_edit2
        } else {
            t_edit
        }
    }

    pub fn phase(&self, steps: usize, t: usize, t_edit: usize) -> Phase {
        let after = |k: usize| t + k > steps;
        match &self.mask {
            None if after(t_edit) => Phase::Guided,
            None => Phase::Free,
            Some(_) if after(self.t_edit1) => Phase::Guided,
            Some(_) if after(self.t_edit2) => Phase::Blended,
            Some(_) => Phase::Free,
        }
    }
}

/// Per-step diagnostics of a translation run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x_norm: f64,
    pub guided: bool,
    pub style: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Checksum of `ε_θ(x_t, t)`.
    pub eps_checksum: u64,
    /// Checksum of the epsilon fed to the noise-direction term.
    pub noise_eps_checksum: u64,
}

impl StepRecord {
    pub fn noise_term_unperturbed(&self) -> bool {
        self.eps_checksum == self.noise_eps_checksum
    }
}

pub fn checksum(v: &DVector<f64>) -> u64 {
    // FNV-1a over the raw bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v.iter() {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn trace_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("t,x_norm,guided,style,reg,total,grad_norm,eps_checksum,noise_eps_checksum\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{:e},{:e},{:e},{:016x},{:016x}",
            r.t, r.x_norm, r.guided as u8, r.style, r.reg, r.total, r.grad_norm, r.eps_checksum, r.noise_eps_checksum
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct Translation {
    pub x_out: DVector<f64>,
    pub x_inverted: DVector<f64>,
    pub trace: Vec<StepRecord>,
}

/// Everything a translation run needs besides the source point.
pub struct Translator<'a> {
    /// Model used for the forward inversion.
    pub forward_model: &'a dyn EpsModel,
    /// Model used for the reverse pass (e.g. conditioned on the target).
    pub reverse_model: &'a dyn EpsModel,
    pub schedule: &'a NoiseSchedule,
    pub guidance: &'a GuidanceConfig,
    pub edit: &'a EditSchedule,
    pub style: Option<&'a dyn Objective>,
    pub stochastic_inversion: bool,
}

impl Translator<'_> {
    pub fn validate(&self) -> Result<()> {
        let dim = self.forward_model.dim();
        ensure_dim(dim, self.reverse_model.dim())?;
        self.guidance.validate(self.schedule.steps())?;
        self.edit.validate(self.schedule.steps(), dim)
    }

    pub fn invert(&self, x_src: &DVector<f64>, noise: &NoiseStream) -> Result<Inversion> {
        let window = self.edit.window(self.guidance.t_edit);
        if self.stochastic_inversion {
            stochastic_forward_invert(self.forward_model, self.schedule, x_src, window, noise)
        } else {
            ddim_forward_invert(self.forward_model, self.schedule, x_src, window)
        }
    }

    pub fn translate(&self, x_src: &DVector<f64>, noise: &NoiseStream) -> Result<Translation> {
        self.validate()?;
        let inversion = self.invert(x_src, noise)?;
        let steps = self.schedule.steps();
        let dim = x_src.len();
        let cfg = self.guidance;
        let mut x = inversion.x_final().clone();
        let mut trace = Vec::with_capacity(steps);
        for t in (1..=steps).rev() {
            let sigma = self.schedule.sigma(t)?;
            let phase = self.edit.phase(steps, t, cfg.t_edit);
            let z = (sigma != 0.0).then(|| noise.reverse(t, dim));
            let x_norm = x.norm();
            let next = if phase == Phase::Free {
                let eps = self.reverse_model.eps(self.schedule, &x, t)?;
                let x_hat = denoise(self.schedule, &x, &eps, t);
                let sum = checksum(&eps);
                trace.push(StepRecord {
                    t,
                    x_norm,
                    guided: false,
                    style: f64::NAN,
                    reg: f64::NAN,
                    total: f64::NAN,
                    grad_norm: 0.0,
                    eps_checksum: sum,
                    noise_eps_checksum: sum,
                });
                ddim_update(self.schedule, t, &x_hat, &eps, sigma, z.as_ref())?
            } else {
                let entry = inversion.cache.get(t)?;
                let loss = TotalLoss {
                    style: self.style,
                    anchor: Some(&entry.x_hat),
                    lambda_sty: cfg.lambda_sty,
                    lambda_reg: cfg.lambda_reg,
                };
                let step = agg_update(self.reverse_model, self.schedule, &loss, &x, t, cfg, true)?;
                let x_hat_prime = match (phase, &self.edit.mask) {
                    (Phase::Blended, Some(m)) => {
                        step.x_hat_prime.component_mul(&m.map(|w| 1.0 - w)) + step.x_hat.component_mul(m)
                    }
                    _ => step.x_hat_prime.clone(),
                };
                trace.push(StepRecord {
                    t,
                    x_norm,
                    guided: true,
                    style: step.loss_after.style,
                    reg: step.loss_after.reg,
                    total: step.loss_after.total,
                    grad_norm: step.grad_norm,
                    eps_checksum: checksum(&step.eps),
                    noise_eps_checksum: checksum(&step.noise_eps),
                });
                ddim_update(self.schedule, t, &x_hat_prime, &step.noise_eps, sigma, z.as_ref())?
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("reverse state at t = {t}"),
                });
            }
            x = next;
        }
        Ok(Translation {
            x_out: x,
            x_inverted: inversion.x_final().clone(),
            trace,
        })
    }
}

/// Run the translation in the latent space of `codec` and decode the result.
///
/// Models in `translator` act on latents; `style` acts on decoded points.
pub fn translate_latent(
    codec: &LatentCodec,
    translator: &Translator<'_>,
    style: Option<&dyn Objective>,
    x_src: &DVector<f64>,
    noise: &NoiseStream,
) -> Result<Translation> {
    let z_src = codec.encode(x_src)?;
    let decoded = style.map(|inner| Decoded { inner, codec });
    let inner = Translator {
        style: decoded.as_ref().map(|d| d as &dyn Objective),
        forward_model: translator.forward_model,
        reverse_model: translator.reverse_model,
        schedule: translator.schedule,
        guidance: translator.guidance,
        edit: translator.edit,
        stochastic_inversion: translator.stochastic_inversion,
    };
    let out = inner.translate(&z_src, noise)?;
    Ok(Translation {
        x_out: codec.decode(&out.x_out)?,
        x_inverted: out.x_inverted,
        trace: out.trace,
    })
}

/// Ancestral sampling from pure noise with `σ_t² = β_t`.
pub fn ddpm_sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    noise: &NoiseStream,
) -> Result<DVector<f64>> {
    let dim = model.dim();
    let mut x = noise.prior(dim);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.eps(schedule, &x, t)?;
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        x = (x - eps * coef) / schedule.alpha(t).sqrt();
        if t > 1 {
            x.axpy(beta.sqrt(), &noise.reverse(t, dim), 1.0);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("ddpm state at t = {t}"),
            });
        }
    }
    Ok(x)
}

/// Whether the subsequent noise-direction terms must have used the unperturbed epsilon.
pub fn expects_asymmetric(strategy: Strategy) -> bool {
    strategy != Strategy::SymmetricAblation
}

//! Experiment configuration: TOML text, mode defaults, validation and hashing.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, SRule, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Image,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Analytic,
    Epsnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Directional,
    FeatureMatch,
}

/// One column of the sweep: a guidance strategy or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Guided(Strategy),
    /// AGG with `λ_reg = 0`.
    NoReg,
    /// Fresh ancestral samples from the target component.
    DdpmResample,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Guided(s) => s.name(),
            Variant::NoReg => "no_reg",
            Variant::DdpmResample => "ddpm_resample",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_reg" => Ok(Variant::NoReg),
            "ddpm_resample" => Ok(Variant::DdpmResample),
            other => Ok(Variant::Guided(
                other
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown variant `{other}`")))?,
            )),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSection {
    pub latent_dim: usize,
    pub codec_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsNetSection {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub init_seed: u64,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_samples: usize,
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
}

impl Default for EpsNetSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_features: 8,
            init_seed: 0,
            train_steps: 2000,
            lr: 1e-3,
            batch: 128,
            train_samples: 4096,
            data_seed: 0,
            weights_file: None,
        }
    }
}

/// Data distribution (always a mixture) plus the score model used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    /// Pull of the forward/reverse models toward the source/target class, in `[0, 1)`.
    pub kappa: f64,
    pub score: ScoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentSection>,
    pub epsnet: EpsNetSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub lambda_sty: f64,
    pub lambda_reg: f64,
    pub s_rule: SRule,
    pub dds_steps: usize,
    pub dds_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_period: Option<usize>,
    pub flip_sign: bool,
    pub mcg_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub t_edit: usize,
    pub t_edit1: usize,
    pub t_edit2: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    pub stochastic_inversion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub n_aug: usize,
    pub aug_scale: f64,
    pub lambda_i: f64,
    pub lambda_s: f64,
    pub lambda_mse: f64,
    /// Per-class anchor points for the stand-in text embeddings; defaults to the means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub trajectories: usize,
    /// `[source_class, target_class]` pairs.
    pub pairs: Vec<[usize; 2]>,
    pub variants: Vec<Variant>,
    pub reference_count: usize,
    pub reference_seed: u64,
    pub success_threshold: f64,
    pub traces: bool,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub guidance: GuidanceSection,
    pub edit: EditSection,
    pub loss: LossSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn defaults(mode: Mode) -> Self {
        let image = ExperimentConfig {
            name: "experiment".into(),
            mode,
            schedule: ScheduleSection {
                steps: 60,
                beta_start: 0.0017,
                beta_end: 0.33,
                eta: 0.8,
            },
            model: ModelSection {
                weights: vec![0.5, 0.5],
                means: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
                variances: vec![0.25, 0.25],
                kappa: 0.0,
                score: ScoreKind::Analytic,
                latent: None,
                epsnet: EpsNetSection::default(),
            },
            guidance: GuidanceSection {
                lambda_sty: 200.0,
                lambda_reg: 200.0,
                s_rule: SRule::SqrtOneMinusAlphaBar,
                dds_steps: 2,
                dds_lr: 0.02,
                resample_period: None,
                flip_sign: false,
                mcg_scale: 1.0,
            },
            edit: EditSection {
                t_edit: 20,
                t_edit1: 20,
                t_edit2: 20,
                mask: None,
                mask_file: None,
                stochastic_inversion: false,
            },
            loss: LossSection {
                kind: LossKind::Directional,
                embed_dim: 8,
                embed_seed: 11,
                n_aug: 8,
                aug_scale: 0.01,
                lambda_i: 0.0,
                lambda_s: 0.0,
                lambda_mse: 0.0,
                anchors: None,
            },
            run: RunSection {
                seeds: vec![0],
                trajectories: 10,
                pairs: vec![[0, 1]],
                variants: vec![Variant::Guided(Strategy::Agg)],
                reference_count: 200,
                reference_seed: 0,
                success_threshold: 0.9,
                traces: false,
                output_dir: "runs/experiment".into(),
            },
        };
        match mode {
            Mode::Image => image,
            Mode::Latent => {
                let g = GuidanceConfig::latent_defaults();
                ExperimentConfig {
                    schedule: ScheduleSection {
                        steps: 50,
                        ..image.schedule
                    },
                    model: ModelSection {
                        latent: Some(LatentSection {
                            latent_dim: 2,
                            codec_seed: 0,
                        }),
                        kappa: 0.5,
                        ..image.model
                    },
                    guidance: GuidanceSection {
                        lambda_sty: g.lambda_sty,
                        lambda_reg: g.lambda_reg,
                        dds_steps: g.dds_steps,
                        dds_lr: g.dds_lr,
                        ..image.guidance
                    },
                    edit: EditSection {
                        t_edit: 40,
                        t_edit1: 15,
                        t_edit2: 40,
                        ..image.edit
                    },
                    ..image
                }
            }
        }
    }

    /// Guidance knobs for one strategy, with the edit window and loss weights folded in.
    pub fn guidance_config(&self, strategy: Strategy) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            strategy,
            lambda_sty: g.lambda_sty,
            lambda_reg: g.lambda_reg,
            s_rule: g.s_rule,
            t_edit: self.edit.t_edit,
            dds_steps: g.dds_steps,
            dds_lr: g.dds_lr,
            resample_period: g.resample_period,
            lambda_i: self.loss.lambda_i,
            lambda_s: self.loss.lambda_s,
            lambda_mse: self.loss.lambda_mse,
            flip_sign: g.flip_sign,
            mcg_scale: g.mcg_scale,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.model.means.first().map_or(0, |m| m.len())
    }

    /// Dimension of the space the diffusion runs in.
    pub fn diffusion_dim(&self) -> usize {
        match (&self.mode, &self.model.latent) {
            (Mode::Latent, Some(l)) => l.latent_dim,
            _ => self.data_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.model.means.len();
        if k == 0 {
            return bad("model.means is empty".into());
        }
        if self.model.weights.len() != k || self.model.variances.len() != k {
            return bad("model.weights, model.means and model.variances must have equal length".into());
        }
        let d = self.data_dim();
        if d == 0 || self.model.means.iter().any(|m| m.len() != d) {
            return bad("model.means must share one positive dimension".into());
        }
        if !(0.0..1.0).contains(&self.model.kappa) {
            return bad(format!("model.kappa must lie in [0, 1), got {}", self.model.kappa));
        }
        match (self.mode, &self.model.latent) {
            (Mode::Latent, None) => return bad("latent mode needs a [model.latent] section".into()),
            (Mode::Latent, Some(l)) if l.latent_dim == 0 || l.latent_dim > d => {
                return bad(format!("latent_dim must lie in 1..={d}"));
            }
            (Mode::Image, Some(_)) => return bad("[model.latent] is only valid in latent mode".into()),
            _ => {}
        }
        let steps = self.schedule.steps;
        self.guidance_config(Strategy::Agg).validate(steps)?;
        let e = &self.edit;
        if e.mask.is_some() && e.mask_file.is_some() {
            return bad("set at most one of edit.mask and edit.mask_file".into());
        }
        if let Some(m) = &e.mask {
            if !(e.t_edit1 <= e.t_edit2 && e.t_edit2 <= steps) {
                return bad(format!(
                    "need t_edit1 <= t_edit2 <= T, got {} / {} / {steps}",
                    e.t_edit1, e.t_edit2
                ));
            }
            if m.len() != self.diffusion_dim() {
                return bad(format!(
                    "mask has {} weights, expected {}",
                    m.len(),
                    self.diffusion_dim()
                ));
            }
        }
        let l = &self.loss;
        if l.embed_dim == 0 {
            return bad("loss.embed_dim must be positive".into());
        }
        if l.aug_scale.is_nan() || l.aug_scale < 0.0 {
            return bad("loss.aug_scale must be non-negative".into());
        }
        if let Some(a) = &l.anchors {
            if a.len() != k || a.iter().any(|p| p.len() != d) {
                return bad(format!("loss.anchors needs {k} points of dimension {d}"));
            }
        }
        let r = &self.run;
        if r.seeds.is_empty() {
            return bad("run.seeds is empty".into());
        }
        if r.trajectories == 0 {
            return bad("run.trajectories must be positive".into());
        }
        if r.pairs.is_empty() {
            return bad("run.pairs is empty".into());
        }
        if let Some(p) = r.pairs.iter().find(|p| p[0] >= k || p[1] >= k || p[0] == p[1]) {
            return bad(format!("invalid class pair {p:?} for {k} components"));
        }
        if r.variants.is_empty() {
            return bad("run.variants is empty".into());
        }
        if r.reference_count < 2 {
            return bad("run.reference_count must be at least 2".into());
        }
        let mut seen = r.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != r.seeds.len() {
            return bad("run.seeds contains duplicates".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring only the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.output_dir.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Output directory, resolved against `AGG_LAB_OUTPUT_ROOT` when relative.
    pub fn output_path(&self) -> PathBuf {
        let p = PathBuf::from(&self.run.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if p.is_relative() => PathBuf::from(root).join(p),
            _ => p,
        }
    }
}

pub const OUTPUT_ROOT_ENV: &str = "AGG_LAB_OUTPUT_ROOT";

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    Err(Error::Config("empty override key".into()))
}

/// Parse a `key.path=value` override; the value is read as TOML, falling back to a string.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let k = k.trim();
    let v = v.trim();
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

/// Parse config text, apply overrides, fill mode defaults and validate.
///
/// `base_dir` resolves a relative `edit.mask_file`.
pub fn parse_config(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let mut user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut user, &k, v)?;
    }
    let mode = match user.get("mode") {
        None => Mode::Image,
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("mode: {e}")))?,
    };
    let mut merged =
        toml::Value::try_from(ExperimentConfig::defaults(mode)).map_err(|e| Error::Config(e.to_string()))?;
    if mode == Mode::Image {
        // Image defaults carry no latent section; a user-supplied one must fail validation, not merge.
        if let Some(t) = merged.get_mut("model").and_then(|m| m.as_table_mut()) {
            t.remove("latent");
        }
    }
    merge(&mut merged, toml::Value::Table(user));
    let mut cfg: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(file) = &cfg.edit.mask_file {
        let path = match base_dir {
            Some(b) if Path::new(file).is_relative() => b.join(file),
            _ => PathBuf::from(file),
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mask = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad mask value `{s}` in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.edit.mask = Some(mask);
        cfg.edit.mask_file = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides, path.parent())
}

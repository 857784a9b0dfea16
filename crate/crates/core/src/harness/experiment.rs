//! Model construction and the per-cell translation sweep.

use std::path::Path;

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::epsnet::{train_dsm, Activation, EpsNet, TrainOptions};
use crate::error::{Error, Result};
use crate::guidance::{DirectionalStyle, FeatureMatchStyle, Objective, StandInEmbedder, Strategy, StyleLoss};
use crate::harness::config::{ExperimentConfig, LossKind, Mode, ScoreKind, Variant};
use crate::metrics::{classwise_frechet, frechet_distance, structure_distance, SampleSet, StructureSpace};
use crate::sampler::{ddpm_sample, derive_seed, translate_latent, EditSchedule, NoiseStream, StepRecord, Translator};
use crate::schedule::NoiseSchedule;
use crate::score_models::{EpsModel, GmmModel, LatentCodec};

const SOURCE_TAG: u64 = 0x0053_5243;
const REFERENCE_TAG: u64 = 0x0052_4546;

/// Score models for one class pair.
struct PairModels {
    forward: Box<dyn EpsModel>,
    reverse: Box<dyn EpsModel>,
}

/// Everything derived from a config that cells share read-only.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    /// Data-space mixture.
    pub data: GmmModel,
    /// Mixture in the space the diffusion runs in.
    pub diffusion: GmmModel,
    pub codec: LatentCodec,
    pub embedder: StandInEmbedder,
    pub edit: EditSchedule,
    net: Option<EpsNet>,
    pairs: Vec<PairModels>,
}

/// Per-cell metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub sfid: f64,
    pub csfid: f64,
    pub structure: f64,
    pub structure_raw: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub seed: u64,
    pub variant: Variant,
    pub sources: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    /// Target class of each trajectory.
    pub classes: Vec<usize>,
    pub metrics: CellMetrics,
    pub traces: Vec<Vec<StepRecord>>,
}

fn to_vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Self::build_with_net(config, None)
    }

    /// Build, reusing an already trained net when the config asks for one.
    pub fn build_with_net(config: &ExperimentConfig, net: Option<EpsNet>) -> Result<Self> {
        config.validate()?;
        let s = &config.schedule;
        let schedule = NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end, s.eta)?;
        let m = &config.model;
        let data = GmmModel::new(
            m.weights.clone(),
            m.means.iter().map(|v| to_vec(v)).collect(),
            m.variances.clone(),
        )?;
        let codec = match (config.mode, &m.latent) {
            (Mode::Latent, Some(l)) => LatentCodec::random(config.data_dim(), l.latent_dim, l.codec_seed)?,
            _ => LatentCodec::identity(config.data_dim()),
        };
        let diffusion = data.encoded(&codec)?;
        let l = &config.loss;
        let embedder = StandInEmbedder::new(config.data_dim(), l.embed_dim, l.embed_seed)?.with_augmentation(
            l.n_aug,
            l.aug_scale,
            l.embed_seed,
        );
        let edit = match &config.edit.mask {
            Some(mask) => EditSchedule::masked(config.edit.t_edit1, config.edit.t_edit2, to_vec(mask)),
            None => EditSchedule::unmasked(),
        };
        let net = match (m.score, net) {
            (ScoreKind::Epsnet, Some(n)) => Some(n),
            (ScoreKind::Epsnet, None) => Some(load_or_train(config, &diffusion)?),
            (ScoreKind::Analytic, _) => None,
        };
        let mut pairs = Vec::new();
        for p in &config.run.pairs {
            let models = match &net {
                Some(n) => PairModels {
                    forward: Box::new(n.clone()),
                    reverse: Box::new(n.clone()),
                },
                None => PairModels {
                    forward: Box::new(diffusion.conditioned(p[0], m.kappa)?),
                    reverse: Box::new(diffusion.conditioned(p[1], m.kappa)?),
                },
            };
            pairs.push(models);
        }
        Ok(Self {
            config: config.clone(),
            schedule,
            data,
            diffusion,
            codec,
            embedder,
            edit,
            net,
            pairs,
        })
    }

    pub fn net(&self) -> Option<&EpsNet> {
        self.net.as_ref()
    }

    /// Model that inverts the sources of pair `p`.
    pub fn forward_model(&self, p: usize) -> &dyn EpsModel {
        self.pairs[p].forward.as_ref()
    }

    fn anchor(&self, class: usize) -> DVector<f64> {
        match &self.config.loss.anchors {
            Some(a) => to_vec(&a[class]),
            None => self.data.means()[class].clone(),
        }
    }

    /// Style loss for one source point, acting in data space.
    pub fn style_loss(&self, pair: [usize; 2], x_src: &DVector<f64>) -> Result<StyleLoss> {
        let l = &self.config.loss;
        match l.kind {
            LossKind::Directional => {
                let c_src = self.embedder.embed(&self.anchor(pair[0]))?;
                let c_trg = self.embedder.embed(&self.anchor(pair[1]))?;
                Ok(StyleLoss::Directional(DirectionalStyle::new(
                    self.embedder.clone(),
                    x_src,
                    &c_src,
                    &c_trg,
                    l.lambda_i,
                    l.lambda_s,
                )?))
            }
            LossKind::FeatureMatch => Ok(StyleLoss::FeatureMatch(FeatureMatchStyle::new(
                self.embedder.clone(),
                self.anchor(pair[1]),
                l.lambda_mse,
            )?)),
        }
    }

    /// Source point `j` of pair `p` under `seed`; identical across variants.
    pub fn source(&self, seed: u64, p: usize, j: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[SOURCE_TAG, seed, p as u64, j as u64]));
        self.data.sample_component(self.config.run.pairs[p][0], &mut rng)
    }

    fn trajectory_id(&self, p: usize, j: usize) -> u64 {
        (p * self.config.run.trajectories + j) as u64
    }

    pub fn noise(&self, seed: u64, p: usize, j: usize) -> NoiseStream {
        NoiseStream::new(seed, self.trajectory_id(p, j))
    }

    /// Reference samples of each pair's target class, projected like the outputs.
    pub fn references(&self, seed: u64) -> Result<SampleSet> {
        let r = &self.config.run;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[REFERENCE_TAG, r.reference_seed, seed]));
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for p in &r.pairs {
            for _ in 0..r.reference_count {
                let x = self.data.sample_component(p[1], &mut rng);
                points.push(self.codec.decode(&self.codec.encode(&x)?)?);
                labels.push(p[1]);
            }
        }
        SampleSet::labeled(points, labels)
    }

    fn translate_one(
        &self,
        variant: Variant,
        seed: u64,
        p: usize,
        j: usize,
    ) -> Result<(DVector<f64>, Vec<StepRecord>)> {
        let pair = self.config.run.pairs[p];
        let noise = self.noise(seed, p, j);
        let x_src = self.source(seed, p, j);
        let models = &self.pairs[p];
        let strategy = match variant {
            Variant::DdpmResample => {
                let k = pair[1];
                let target = GmmModel::single(self.diffusion.means()[k].clone(), self.diffusion.variances()[k])?;
                let z = ddpm_sample(&target, &self.schedule, &noise)?;
                return Ok((self.codec.decode(&z)?, Vec::new()));
            }
            Variant::NoReg => Strategy::Agg,
            Variant::Guided(s) => s,
        };
        let mut guidance = self.config.guidance_config(strategy);
        if variant == Variant::NoReg {
            guidance.lambda_reg = 0.0;
        }
        let style = self.style_loss(pair, &x_src)?;
        let use_style = guidance.lambda_sty != 0.0;
        let translator = Translator {
            forward_model: models.forward.as_ref(),
            reverse_model: models.reverse.as_ref(),
            schedule: &self.schedule,
            guidance: &guidance,
            edit: &self.edit,
            style: None,
            stochastic_inversion: self.config.edit.stochastic_inversion,
        };
        let style_ref = use_style.then_some(&style as &dyn Objective);
        let out = translate_latent(&self.codec, &translator, style_ref, &x_src, &noise)?;
        Ok((out.x_out, out.trace))
    }

    pub fn run_cell(&self, seed: u64, variant: Variant) -> Result<CellOutput> {
        let r = &self.config.run;
        let mut sources = Vec::new();
        let mut outputs = Vec::new();
        let mut classes = Vec::new();
        let mut traces = Vec::new();
        for (p, pair) in r.pairs.iter().enumerate() {
            for j in 0..r.trajectories {
                let (x, trace) = self.translate_one(variant, seed, p, j)?;
                sources.push(self.source(seed, p, j));
                outputs.push(x);
                classes.push(pair[1]);
                if r.traces {
                    traces.push(trace);
                }
            }
        }
        let metrics = self.metrics(seed, &sources, &outputs, &classes)?;
        Ok(CellOutput {
            seed,
            variant,
            sources,
            outputs,
            classes,
            metrics,
            traces,
        })
    }

    /// Responsibility of `class` at a data-space output, measured in the diffusion space.
    pub fn target_responsibility(&self, x: &DVector<f64>, class: usize) -> Result<f64> {
        Ok(self.diffusion.clean_responsibilities(&self.codec.encode(x)?)?[class])
    }

    pub fn metrics(
        &self,
        seed: u64,
        sources: &[DVector<f64>],
        outputs: &[DVector<f64>],
        classes: &[usize],
    ) -> Result<CellMetrics> {
        let references = self.references(seed)?;
        let out = SampleSet::labeled(outputs.to_vec(), classes.to_vec())?;
        let mut hits = 0usize;
        for (x, &c) in outputs.iter().zip(classes) {
            if self.target_responsibility(x, c)? > self.config.run.success_threshold {
                hits += 1;
            }
        }
        Ok(CellMetrics {
            sfid: frechet_distance(&out, &references)?,
            csfid: classwise_frechet(&out, &references)?,
            structure: structure_distance(StructureSpace::Embedding(&self.embedder), sources, outputs)?,
            structure_raw: structure_distance(StructureSpace::Raw, sources, outputs)?,
            success_rate: hits as f64 / outputs.len() as f64,
        })
    }
}

/// Samples the net is trained on: draws from the diffusion-space mixture.
pub fn training_data(config: &ExperimentConfig, diffusion: &GmmModel) -> Vec<DVector<f64>> {
    let e = &config.model.epsnet;
    let mut rng = ChaCha8Rng::seed_from_u64(e.data_seed);
    (0..e.train_samples).map(|_| diffusion.sample(&mut rng).1).collect()
}

/// Train a fresh net per the config; returns the net and its loss trace.
pub fn train_net(config: &ExperimentConfig) -> Result<(EpsNet, Vec<f64>)> {
    let exp_free = Experiment::build_with_net(
        &ExperimentConfig {
            model: crate::harness::config::ModelSection {
                score: ScoreKind::Analytic,
                ..config.model.clone()
            },
            ..config.clone()
        },
        None,
    )?;
    let e = &config.model.epsnet;
    let net = EpsNet::new(
        config.diffusion_dim(),
        &e.hidden,
        e.time_features,
        Activation::Softplus,
        e.init_seed,
    )?;
    let data = training_data(config, &exp_free.diffusion);
    let opts = TrainOptions {
        steps: e.train_steps,
        lr: e.lr,
        batch: e.batch,
        seed: e.init_seed,
    };
    let trained = train_dsm(&net, &data, &exp_free.schedule, &opts)?;
    Ok((trained.net, trained.losses))
}

fn load_or_train(config: &ExperimentConfig, diffusion: &GmmModel) -> Result<EpsNet> {
    if let Some(file) = &config.model.epsnet.weights_file {
        let path = Path::new(file);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net = EpsNet::from_text(&text)?;
        if net.dim() != diffusion.dim() {
            return Err(Error::DimensionMismatch {
                expected: diffusion.dim(),
                got: net.dim(),
            });
        }
        return Ok(net);
    }
    Ok(train_net(config)?.0)
}

//! Small multilayer epsilon network with hand-written reverse mode.
//!
//! Input is `[x; τ-features]` with `τ = t/T` encoded as `sin/cos(2^j·π·τ)`.
//! Hidden layers use softplus; the output layer is affine.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::guidance::Adam;
use crate::schedule::NoiseSchedule;
use crate::score_models::EpsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    /// No nonlinearity; the net collapses to one affine map.
    Identity,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::WeightFormat(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    data_dim: usize,
    time_features: usize,
    activation: Activation,
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer inputs and pre-activations from one forward pass.
struct Tape {
    inputs: Vec<DVector<f64>>,
    preacts: Vec<DVector<f64>>,
}

impl EpsNet {
    /// Fan-in scaled uniform init, `U(−1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn new(
        data_dim: usize,
        hidden: &[usize],
        time_features: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::InvalidModel("data dimension must be positive".into()));
        }
        if !time_features.is_multiple_of(2) {
            return Err(Error::InvalidModel("time feature count must be even".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidModel("hidden widths must be positive".into()));
        }
        let widths = Self::layout(data_dim, hidden, time_features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            data_dim,
            time_features,
            activation,
            layers,
            seed,
        })
    }

    pub fn from_layers(
        data_dim: usize,
        time_features: usize,
        activation: Activation,
        layers: Vec<Layer>,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("network needs at least one layer".into()));
        }
        if !time_features.is_multiple_of(2) {
            return Err(Error::InvalidModel("time feature count must be even".into()));
        }
        let mut width = data_dim + time_features;
        for l in &layers {
            ensure_dim(width, l.weight.ncols())?;
            ensure_dim(l.weight.nrows(), l.bias.len())?;
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::non_finite("network weights"));
            }
            width = l.weight.nrows();
        }
        ensure_dim(data_dim, width)?;
        Ok(Self {
            data_dim,
            time_features,
            activation,
            layers,
            seed,
        })
    }

    fn layout(data_dim: usize, hidden: &[usize], time_features: usize) -> Vec<usize> {
        let mut widths = vec![data_dim + time_features];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        widths
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.ncols()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_features(&self) -> usize {
        self.time_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn time_embedding(&self, schedule: &NoiseSchedule, t: usize) -> DVector<f64> {
        let tau = t as f64 / schedule.steps() as f64;
        DVector::from_fn(self.time_features, |i, _| {
            let freq = std::f64::consts::PI * (1u64 << (i / 2)) as f64;
            if i % 2 == 0 {
                (freq * tau).sin()
            } else {
                (freq * tau).cos()
            }
        })
    }

    fn input(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        ensure_dim(self.data_dim, x.len())?;
        ensure_finite(x, "network input")?;
        let feats = self.time_embedding(schedule, t);
        Ok(DVector::from_iterator(
            self.data_dim + self.time_features,
            x.iter().chain(feats.iter()).cloned(),
        ))
    }

    fn run(&self, input: DVector<f64>) -> (DVector<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
        };
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = &layer.weight * &h + &layer.bias;
            let next = if i == last {
                pre.clone()
            } else {
                pre.map(|v| self.activation.apply(v))
            };
            tape.inputs.push(h);
            tape.preacts.push(pre);
            h = next;
        }
        (h, tape)
    }

    /// Cotangent at the network input for output cotangent `v`.
    fn backward(&self, tape: &Tape, v: &DVector<f64>, mut grads: Option<&mut [Layer]>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut g = v.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                let act = self.activation;
                g.zip_apply(&tape.preacts[i], |gi, p| *gi *= act.derivative(p));
            }
            if let Some(acc) = grads.as_deref_mut() {
                acc[i].weight.ger(1.0, &g, &tape.inputs[i], 1.0);
                acc[i].bias += &g;
            }
            g = self.layers[i].weight.tr_mul(&g);
        }
        g
    }

    pub fn forward(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let (out, _) = self.run(self.input(schedule, x, t)?);
        Ok(out)
    }

    pub fn vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.data_dim, v.len())?;
        let (_, tape) = self.run(self.input(schedule, x, t)?);
        let full = self.backward(&tape, v, None);
        Ok(full.rows(0, self.data_dim).into_owned())
    }

    fn zero_grads(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: DVector::zeros(l.bias.len()),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.param_count(), params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mean squared epsilon error over a batch and its parameter gradient.
    pub fn batch_loss_and_grad(
        &self,
        schedule: &NoiseSchedule,
        batch: &[(DVector<f64>, usize, DVector<f64>)],
    ) -> Result<(f64, Vec<f64>)> {
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (x_t, t, target) in batch {
            let (out, tape) = self.run(self.input(schedule, x_t, *t)?);
            let resid = &out - target;
            loss += resid.norm_squared() * scale;
            self.backward(&tape, &(resid * (2.0 * scale)), Some(&mut grads));
        }
        Ok((loss, flatten(&grads)))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.widths().iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "epsnet-text 1");
        let _ = writeln!(out, "data_dim {}", self.data_dim);
        let _ = writeln!(out, "widths {}", widths.join(" "));
        let _ = writeln!(out, "activation {}", self.activation.tag());
        let _ = writeln!(out, "time_features {}", self.time_features);
        let _ = writeln!(out, "seed {}", self.seed);
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {} {} {}", i, l.weight.nrows(), l.weight.ncols());
            for r in 0..l.weight.nrows() {
                let row: Vec<String> = l.weight.row(r).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
            let bias: Vec<String> = l.bias.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", bias.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::WeightFormat(msg.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        fn header<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::WeightFormat("truncated header".into()))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::WeightFormat(format!("expected `{key}`, found `{line}`")))?;
            Ok(rest.trim().to_string())
        }
        if header(&mut lines, "epsnet-text")? != "1" {
            return Err(bad("unsupported format version"));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::WeightFormat(format!("bad integer `{s}`")))
        };
        let data_dim = parse_usize(&header(&mut lines, "data_dim")?)?;
        let widths = header(&mut lines, "widths")?
            .split_whitespace()
            .map(parse_usize)
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_tag(&header(&mut lines, "activation")?)?;
        let time_features = parse_usize(&header(&mut lines, "time_features")?)?;
        let seed = header(&mut lines, "seed")?
            .parse::<u64>()
            .map_err(|_| bad("bad seed"))?;
        if widths.len() < 2 {
            return Err(bad("need at least two widths"));
        }
        let parse_row = |line: Option<&str>, n: usize| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| bad("truncated tensor data"))?;
            let vals = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::WeightFormat(format!("bad number `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != n {
                return Err(Error::WeightFormat(format!(
                    "expected {n} values, found {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let expect = format!("{} {} {}", i, w[1], w[0]);
            if header(&mut lines, "layer")? != expect {
                return Err(Error::WeightFormat(format!("layer {i} header mismatch")));
            }
            let mut data = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[1] {
                data.extend(parse_row(lines.next(), w[0])?);
            }
            let weight = DMatrix::from_row_slice(w[1], w[0], &data);
            let bias = DVector::from_vec(parse_row(lines.next(), w[1])?);
            layers.push(Layer { weight, bias });
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after last layer"));
        }
        Self::from_layers(data_dim, time_features, activation, layers, seed)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

impl EpsModel for EpsNet {
    fn dim(&self) -> usize {
        self.data_dim
    }
    fn eps(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.forward(schedule, x, t)
    }
    fn eps_vjp(&self, schedule: &NoiseSchedule, x: &DVector<f64>, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.vjp(schedule, x, t, v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: EpsNet,
    pub losses: Vec<f64>,
}

/// Epsilon-matching regression: `E‖ε − net(√ᾱ x₀ + √(1−ᾱ) ε, t)‖²` with Adam.
pub fn train_dsm(
    net: &EpsNet,
    data: &[DVector<f64>],
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::InvalidModel("training set is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::InvalidModel("batch size must be positive".into()));
    }
    for x in data {
        ensure_dim(net.dim(), x.len())?;
    }
    let mut net = net.clone();
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    let steps = schedule.steps();
    for step in 0..opts.steps {
        let batch: Vec<_> = (0..opts.batch)
            .map(|_| {
                let x0 = &data[rng.random_range(0..data.len())];
                let t = rng.random_range(1..=steps);
                let ab = schedule.alpha_bar(t);
                let noise = DVector::from_fn(x0.len(), |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                });
                let x_t = x0 * ab.sqrt() + &noise * (1.0 - ab).sqrt();
                (x_t, t, noise)
            })
            .collect();
        let (loss, grad) = net.batch_loss_and_grad(schedule, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step, loss });
        }
        adam.step(&mut params, &grad);
        net.set_params(&params)?;
        losses.push(loss);
    }
    Ok(Trained { net, losses })
}

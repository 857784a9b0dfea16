#![allow(dead_code)]

use agg_core::schedule::NoiseSchedule;
use agg_core::score_models::GmmModel;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn sched(steps: usize, eta: f64) -> NoiseSchedule {
    NoiseSchedule::linear(steps, 0.0017, 0.33, eta).unwrap()
}

pub fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Random mixture with `k` components in `d` dimensions.
pub fn random_gmm<R: Rng>(rng: &mut R, k: usize, d: usize) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let drift = 1.0 - weights.iter().sum::<f64>();
    weights[0] += drift;
    let means = (0..k).map(|_| normal_vec(rng, d) * 1.5).collect();
    let variances = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    GmmModel::new(weights, means, variances).unwrap()
}

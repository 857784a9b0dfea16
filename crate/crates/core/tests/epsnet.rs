mod common;

use agg_core::epsnet::{train_dsm, Activation, EpsNet, TrainOptions};
use agg_core::score_models::{EpsModel, GmmModel};
use common::{fd_grad, normal_vec, rel_err, sched};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn vjp_matches_finite_differences_across_layouts() {
    let s = sched(60, 0.0);
    let layouts: [(usize, &[usize], usize); 5] = [
        (1, &[], 0),
        (2, &[8], 2),
        (2, &[16, 16], 4),
        (3, &[6, 5, 4], 8),
        (4, &[32], 6),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (i, (d, hidden, tf)) in layouts.iter().enumerate() {
        let net = EpsNet::new(*d, hidden, *tf, Activation::Softplus, i as u64).unwrap();
        for _ in 0..20 {
            let t = rng.random_range(1..=60);
            let x = normal_vec(&mut rng, *d);
            let v = normal_vec(&mut rng, *d);
            let got = net.eps_vjp(&s, &x, t, &v).unwrap();
            let fd = fd_grad(|y| net.eps(&s, y, t).unwrap().dot(&v), &x, 1e-5);
            worst = worst.max(rel_err(&got, &fd));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn training_is_seed_deterministic() {
    let s = sched(30, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<_> = (0..64).map(|_| normal_vec(&mut rng, 2)).collect();
    let net = EpsNet::new(2, &[8], 4, Activation::Softplus, 1).unwrap();
    let opts = TrainOptions {
        steps: 50,
        lr: 1e-3,
        batch: 16,
        seed: 9,
    };
    let a = train_dsm(&net, &data, &s, &opts).unwrap();
    let b = train_dsm(&net, &data, &s, &opts).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.losses, b.losses);
}

fn rms_gap(
    net: &EpsNet,
    oracle: impl Fn(&DVector<f64>, usize) -> DVector<f64>,
    samples: &[(DVector<f64>, usize)],
) -> f64 {
    let s = sched(60, 0.0);
    let total: f64 = samples
        .iter()
        .map(|(x, t)| (net.eps(&s, x, *t).unwrap() - oracle(x, *t)).norm_squared())
        .sum();
    (total / (samples.len() * samples[0].0.len()) as f64).sqrt()
}

fn held_out(mean: &DVector<f64>, sd: f64, seed: u64, n: usize) -> Vec<(DVector<f64>, usize)> {
    let s = sched(60, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=60);
            let ab = s.alpha_bar(t);
            let x0 = mean + normal_vec(&mut rng, mean.len()) * sd;
            (x0 * ab.sqrt() + normal_vec(&mut rng, mean.len()) * (1.0 - ab).sqrt(), t)
        })
        .collect()
}

#[test]
fn learns_single_gaussian_eps() {
    let s = sched(60, 0.0);
    let mu = DVector::from_vec(vec![1.0, -0.5]);
    let target = GmmModel::single(mu.clone(), 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<_> = (0..4096).map(|_| target.sample(&mut rng).1).collect();
    let net = EpsNet::new(2, &[64, 64], 8, Activation::Softplus, 0).unwrap();
    let opts = TrainOptions {
        steps: 3000,
        lr: 2e-3,
        batch: 128,
        seed: 1,
    };
    let trained = train_dsm(&net, &data, &s, &opts).unwrap().net;
    let gap = rms_gap(
        &trained,
        |x, t| target.eps(&s, x, t).unwrap(),
        &held_out(&mu, 0.5, 77, 2000),
    );
    assert!(gap < 0.1, "rms gap {gap}");
}

#[test]
fn learns_point_mass_eps() {
    let s = sched(60, 0.0);
    let data = vec![DVector::zeros(2)];
    // The optimum has gain 1/sqrt(1−ᾱ_1) ≈ 24 at t = 1, which needs a longer run.
    let net = EpsNet::new(2, &[32, 32], 8, Activation::Softplus, 0).unwrap();
    let opts = TrainOptions {
        steps: 12000,
        lr: 2e-3,
        batch: 128,
        seed: 3,
    };
    let trained = train_dsm(&net, &data, &s, &opts).unwrap().net;
    let oracle = |x: &DVector<f64>, t: usize| x / (1.0 - s.alpha_bar(t)).sqrt();
    let gap = rms_gap(&trained, oracle, &held_out(&DVector::zeros(2), 0.0, 78, 2000));
    assert!(gap < 0.05, "rms gap {gap}");
}

mod common;

use agg_core::guidance::StandInEmbedder;
use agg_core::metrics::{classwise_frechet, frechet_distance, structure_distance, SampleSet, StructureSpace};
use common::normal_vec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Correlated 2-D Gaussian cloud with random mean and mixing matrix.
fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<DVector<f64>> {
    let mean = normal_vec(rng, 2) * 2.0;
    let mix = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.5..1.5));
    (0..n).map(|_| &mean + &mix * normal_vec(rng, 2)).collect()
}

fn fitted(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let ridge = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    (mean, cov)
}

#[test]
fn one_dimensional_projections_match_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let a = cloud(&mut rng, 200);
        let b = cloud(&mut rng, 150);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u = DVector::from_vec(vec![angle.cos(), angle.sin()]);
        let pa: Vec<_> = a.iter().map(|p| DVector::from_element(1, p.dot(&u))).collect();
        let pb: Vec<_> = b.iter().map(|p| DVector::from_element(1, p.dot(&u))).collect();
        let (ma, va) = fitted(&pa);
        let (mb, vb) = fitted(&pb);
        let scalar = (ma[0] - mb[0]).powi(2) + (va[(0, 0)].sqrt() - vb[(0, 0)].sqrt()).powi(2);
        let got = frechet_distance(&SampleSet::new(pa), &SampleSet::new(pb)).unwrap();
        assert!((got - scalar).abs() < 1e-10 * (1.0 + scalar), "{got} vs {scalar}");
    }
}

#[test]
fn two_dimensional_closed_form() {
    // For 2×2 SPD matrices, tr((AB)^{1/2}) = sqrt(tr(AB) + 2·sqrt(det(AB))).
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a = cloud(&mut rng, 100);
        let b = cloud(&mut rng, 100);
        let (ma, ca) = fitted(&a);
        let (mb, cb) = fitted(&b);
        let prod = &ca * &cb;
        let cross = (prod.trace() + 2.0 * prod.determinant().sqrt()).sqrt();
        let want = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
        let got = frechet_distance(&SampleSet::new(a), &SampleSet::new(b)).unwrap();
        assert!((got - want).abs() < 1e-9 * (1.0 + want), "{got} vs {want}");
    }
}

#[test]
fn unit_offset_with_identity_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<_> = (0..500).map(|_| normal_vec(&mut rng, 3)).collect();
    let shift = DVector::from_vec(vec![0.0, 1.0, 0.0]);
    let b: Vec<_> = a.iter().map(|p| p + &shift).collect();
    let d = frechet_distance(&SampleSet::new(a), &SampleSet::new(b)).unwrap();
    assert!((d - 1.0).abs() < 1e-10);
}

#[test]
fn diagonal_fallback_for_small_sets() {
    // Two samples in three dimensions: the full covariance has rank one.
    let a = vec![
        DVector::from_vec(vec![0.0, 0.0, 0.0]),
        DVector::from_vec(vec![1.0, 2.0, 3.0]),
    ];
    let b = vec![
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        DVector::from_vec(vec![2.0, 2.0, 3.0]),
    ];
    let d = frechet_distance(&SampleSet::new(a), &SampleSet::new(b)).unwrap();
    assert!((d - 1.0).abs() < 1e-10);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let a = SampleSet::new(vec![DVector::zeros(2), DVector::from_element(2, 1.0)]);
    let b = SampleSet::new(vec![DVector::zeros(3), DVector::from_element(3, 1.0)]);
    assert!(frechet_distance(&a, &b).is_err());
    assert!(frechet_distance(&SampleSet::new(vec![]), &a).is_err());
}

#[test]
fn classwise_single_class_equals_plain_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = cloud(&mut rng, 80);
    let b = cloud(&mut rng, 60);
    let plain = frechet_distance(&SampleSet::new(a.clone()), &SampleSet::new(b.clone())).unwrap();
    let la = SampleSet::labeled(a, vec![3; 80]).unwrap();
    let lb = SampleSet::labeled(b, vec![3; 60]).unwrap();
    assert_eq!(classwise_frechet(&la, &lb).unwrap(), plain);
}

#[test]
fn classwise_two_classes_is_unweighted_mean() {
    // Class 0 differs by a unit shift, class 1 by a shift of 3, with identical spreads.
    let base: Vec<DVector<f64>> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        .iter()
        .map(|p| DVector::from_row_slice(p))
        .collect();
    let shifted = |v: [f64; 2]| base.iter().map(|p| p + DVector::from_row_slice(&v)).collect::<Vec<_>>();
    let mut a_pts = base.clone();
    a_pts.extend(base.iter().cloned());
    let mut b_pts = shifted([1.0, 0.0]);
    b_pts.extend(shifted([0.0, 3.0]));
    let la = SampleSet::labeled(a_pts, [0; 4].into_iter().chain([1; 4]).collect()).unwrap();
    let lb = SampleSet::labeled(b_pts, [0; 4].into_iter().chain([1; 4]).collect()).unwrap();
    let got = classwise_frechet(&la, &lb).unwrap();
    assert!((got - 5.0).abs() < 1e-10, "{got}");
}

#[test]
fn classwise_reports_starved_class() {
    let a = SampleSet::labeled(
        vec![
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 2.0),
        ],
        vec![0, 0, 1],
    )
    .unwrap();
    let err = classwise_frechet(&a, &a).unwrap_err().to_string();
    assert!(err.contains("class 1"), "{err}");
    assert!(classwise_frechet(&SampleSet::new(vec![DVector::zeros(1)]), &a).is_err());
}

#[test]
fn structure_distance_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb = StandInEmbedder::new(2, 8, 11).unwrap();
    let src: Vec<_> = (0..100).map(|_| normal_vec(&mut rng, 2)).collect();
    let out: Vec<_> = (0..100).map(|_| normal_vec(&mut rng, 2)).collect();
    let direct: f64 = src
        .iter()
        .zip(&out)
        .map(|(s, o)| (emb.embed(s).unwrap() - emb.embed(o).unwrap()).norm())
        .sum::<f64>()
        / 100.0;
    let got = structure_distance(StructureSpace::Embedding(&emb), &src, &out).unwrap();
    assert!((got - direct).abs() < 1e-12);
    let raw: f64 = src.iter().zip(&out).map(|(s, o)| (s - o).norm()).sum::<f64>() / 100.0;
    assert!((structure_distance(StructureSpace::Raw, &src, &out).unwrap() - raw).abs() < 1e-12);
    assert_eq!(
        structure_distance(StructureSpace::Embedding(&emb), &src, &src).unwrap(),
        0.0
    );
}

fn set_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 2usize..40, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_exactly_symmetric((seed, n, d) in set_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = SampleSet::new((0..n).map(|_| normal_vec(&mut rng, d)).collect());
        let b = SampleSet::new((0..n + 3).map(|_| normal_vec(&mut rng, d) * 1.7).collect());
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-10);
    }

    #[test]
    fn frechet_is_translation_equivariant((seed, n, d) in set_strategy(), scale in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<_> = (0..n).map(|_| normal_vec(&mut rng, d)).collect();
        let b: Vec<_> = (0..n).map(|_| normal_vec(&mut rng, d) + DVector::from_element(d, 0.5)).collect();
        let shift = normal_vec(&mut rng, d) * scale;
        let before = frechet_distance(&SampleSet::new(a.clone()), &SampleSet::new(b.clone())).unwrap();
        let moved = |v: &[DVector<f64>]| SampleSet::new(v.iter().map(|p| p + &shift).collect());
        let after = frechet_distance(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((before - after).abs() < 1e-10 * (1.0 + before), "{} vs {}", before, after);
    }
}

//! Fréchet distances between fitted Gaussians and a paired structure distance.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::guidance::StandInEmbedder;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<DVector<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn new(points: Vec<DVector<f64>>) -> Self {
        Self { points, labels: None }
    }

    pub fn labeled(points: Vec<DVector<f64>>, labels: Vec<usize>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.len())
    }

    pub fn class(&self, c: usize) -> SampleSet {
        let pts = match &self.labels {
            Some(l) => self
                .points
                .iter()
                .zip(l)
                .filter(|(_, &k)| k == c)
                .map(|(p, _)| p.clone())
                .collect(),
            None => Vec::new(),
        };
        SampleSet::new(pts)
    }
}

struct Moments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn moments(set: &SampleSet, diagonal: bool) -> Result<Moments> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
    }
    let d = set.points[0].len();
    let mut mean = DVector::zeros(d);
    for p in &set.points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        mean += p;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in &set.points {
        let c = p - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    if diagonal {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    let ridge = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    Ok(Moments { mean, cov })
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-10 * scale.max(1e-300);
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -tol) {
        return Err(Error::Metric(format!(
            "{what} is not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    Ok(eig)
}

fn sqrtm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, "covariance")?;
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `tr((Σ_a Σ_b)^{1/2})` via the symmetric form `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrtm(a)?;
    let inner = &ra * b * &ra;
    let eig = psd_eigen(&inner, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Squared Fréchet distance between Gaussians fitted to `a` and `b`.
///
/// Sets with fewer than `d + 1` samples are fitted with a diagonal covariance.
pub fn frechet_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    let (da, db) = match (a.dim(), b.dim()) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Metric("empty sample set".into())),
    };
    if da != db {
        return Err(Error::DimensionMismatch { expected: da, got: db });
    }
    let diagonal = a.len() < da + 1 || b.len() < da + 1;
    let ma = moments(a, diagonal)?;
    let mb = moments(b, diagonal)?;
    let mean_term = (&ma.mean - &mb.mean).norm_squared();
    // Average both orders so the result is exactly symmetric in (a, b).
    let cross = 0.5 * (trace_sqrt_product(&ma.cov, &mb.cov)? + trace_sqrt_product(&mb.cov, &ma.cov)?);
    let d2 = mean_term + (ma.cov.trace() + mb.cov.trace()) - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// Unweighted mean of per-class Fréchet distances over the classes of `a`.
pub fn classwise_frechet(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    let (la, lb) = match (&a.labels, &b.labels) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Metric("classwise distance needs labeled sets".into())),
    };
    let classes: BTreeSet<usize> = la.iter().copied().collect();
    let present: BTreeSet<usize> = lb.iter().copied().collect();
    if classes != present {
        return Err(Error::Metric(format!(
            "class vocabularies differ: {classes:?} vs {present:?}"
        )));
    }
    if classes.is_empty() {
        return Err(Error::Metric("no classes".into()));
    }
    let mut total = 0.0;
    for &c in &classes {
        let (ca, cb) = (a.class(c), b.class(c));
        if ca.len() < 2 || cb.len() < 2 {
            return Err(Error::Metric(format!(
                "class {c} has too few samples ({} / {})",
                ca.len(),
                cb.len()
            )));
        }
        total += frechet_distance(&ca, &cb)?;
    }
    Ok(total / classes.len() as f64)
}

/// Feature space of the paired structure distance.
#[derive(Debug, Clone, Copy)]
pub enum StructureSpace<'a> {
    Embedding(&'a StandInEmbedder),
    Raw,
}

/// Mean distance between index-paired points.
pub fn structure_distance(space: StructureSpace<'_>, src: &[DVector<f64>], out: &[DVector<f64>]) -> Result<f64> {
    if src.len() != out.len() {
        return Err(Error::Metric(format!(
            "paired sets differ in size: {} vs {}",
            src.len(),
            out.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::Metric("empty paired sets".into()));
    }
    let mut total = 0.0;
    for (s, o) in src.iter().zip(out) {
        total += match space {
            StructureSpace::Embedding(e) => (e.embed(s)? - e.embed(o)?).norm(),
            StructureSpace::Raw => (s - o).norm(),
        };
    }
    Ok(total / src.len() as f64)
}

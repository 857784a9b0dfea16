use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::guidance::loss::Objective;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamOutcome {
    pub last: DVector<f64>,
    pub last_loss: f64,
    pub best: DVector<f64>,
    pub best_loss: f64,
}

/// Run `steps` Adam iterations from `x0`, tracking the best iterate seen.
pub fn adam_minimize(objective: &dyn Objective, x0: &DVector<f64>, steps: usize, lr: f64) -> Result<AdamOutcome> {
    let (mut loss, mut grad) = objective.value_and_gradient(x0)?;
    if !loss.is_finite() {
        return Err(Error::OptimizerDiverged { step: 0 });
    }
    let mut x = x0.clone();
    let mut best = x0.clone();
    let mut best_loss = loss;
    let mut adam = Adam::new(x.len(), lr);
    for step in 1..=steps {
        adam.step(x.as_mut_slice(), grad.as_slice());
        let (l, g) = objective.value_and_gradient(&x)?;
        if !l.is_finite() {
            return Err(Error::OptimizerDiverged { step });
        }
        loss = l;
        grad = g;
        if loss < best_loss {
            best_loss = loss;
            best.copy_from(&x);
        }
    }
    Ok(AdamOutcome {
        last: x,
        last_loss: loss,
        best,
        best_loss,
    })
}

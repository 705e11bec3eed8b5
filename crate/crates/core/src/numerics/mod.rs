//! Numeric primitives shared by every model and loss in the crate.

mod params;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use params::{grad_check, Optimizer, OptimizerKind, ParamSet, Parameter};
pub use rng::{fnv1a64 as stable_hash, SeededRng};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Smoothing mass added to the reference distribution before a KL divergence.
pub const KL_SMOOTHING: f64 = 1e-10;

/// Clamp applied to uniform draws before the Gumbel transform.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `v / tau`.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Cosine of the angle between `a` and `b`; 0 when either has zero norm.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `KL(p ‖ q)` in nats. `q` is smoothed as `(q_i + 1e-10) / Σ (q_j + 1e-10)`;
/// terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence: p has {} entries, q has {}",
            p.len(),
            q.len()
        )));
    }
    let z: f64 = q.iter().map(|x| x + KL_SMOOTHING).sum();
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / ((qi + KL_SMOOTHING) / z)).ln())
        .sum::<f64>();
    Ok(kl)
}

/// Standard Gumbel variate `-ln(-ln u)` from a uniform draw `u`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(rng: &mut SeededRng) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

//! Masked two-point zeroth-order estimator.
//!
//! `g = (f(w + ε z̄) − f(w − ε z̄)) / 2ε` with `z̄ = z ⊙ m`, and the update
//! `w ← w − η g z̄`. Perturbed points are built in a scratch copy; `w` itself
//! is never perturbed and restored, because `(x + a) − a` is not exact in
//! floating point and the server must be able to replay the update exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, PerturbationSign, Result};
use crate::masking::{SparseMask, SparseVector};
use crate::model::{Batch, ModelSpec, ParamVector};
use crate::prng::masked_gaussian;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_ETA: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    /// Perturbation magnitude.
    pub epsilon: f64,
    /// Learning rate.
    pub eta: f64,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            eta: DEFAULT_ETA,
        }
    }
}

impl ZoConfig {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self> {
        let cfg = Self { epsilon, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Largest step size the convergence analysis allows for an `L`-smooth
/// objective with `s` trainable coordinates: `1 / (L (s + 2))`.
pub fn stability_bound(smoothness: f64, support_len: usize) -> f64 {
    1.0 / (smoothness * (support_len as f64 + 2.0))
}

/// The scalar projected gradient. `w` is left untouched.
pub fn projected_gradient(
    spec: &ModelSpec,
    w: &[f64],
    z: &SparseVector,
    epsilon: f64,
    batch: &Batch,
) -> Result<f64> {
    let mut scratch = w.to_vec();
    for (i, zi) in z.iter() {
        scratch[i] = w[i] + epsilon * zi;
    }
    let plus = spec.loss(&scratch, batch)?;
    if !plus.is_finite() {
        return Err(numerical(PerturbationSign::Plus));
    }
    for (i, zi) in z.iter() {
        scratch[i] = w[i] - epsilon * zi;
    }
    let minus = spec.loss(&scratch, batch)?;
    if !minus.is_finite() {
        return Err(numerical(PerturbationSign::Minus));
    }
    Ok((plus - minus) / (2.0 * epsilon))
}

fn numerical(sign: PerturbationSign) -> Error {
    Error::Numerical {
        sign,
        client: None,
        step: None,
    }
}

/// `g · z̄`.
pub fn zo_gradient(g: f64, z: &SparseVector) -> SparseVector {
    z.scaled(g)
}

/// `w ← w − (η g) z̄` on the support of `z`.
///
/// Every party that moves parameters along a seeded direction (client step,
/// virtual-path replay, scalar aggregation) goes through this function, so
/// they all perform the same floating-point operations.
#[inline]
pub fn apply_update(w: &mut [f64], z: &SparseVector, eta: f64, g: f64) {
    let step = eta * g;
    for (i, zi) in z.iter() {
        w[i] -= step * zi;
    }
}

/// One local step: draw `z̄` from `seed`, estimate `g` on `batch`, update.
pub fn local_step(
    spec: &ModelSpec,
    w: &ParamVector,
    mask: &SparseMask,
    seed: u64,
    cfg: &ZoConfig,
    batch: &Batch,
) -> Result<(ParamVector, f64)> {
    let z = masked_gaussian(seed, mask);
    let g = projected_gradient(spec, w, &z, cfg.epsilon, batch)?;
    let mut next = w.clone();
    apply_update(&mut next, &z, cfg.eta, g);
    Ok((next, g))
}

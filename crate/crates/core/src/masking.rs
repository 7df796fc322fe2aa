//! Static sparse masks.
//!
//! The mask is chosen once, before training, by ranking parameters on their
//! average squared gradient over a held-out calibration split, and is never
//! changed afterwards. Weight-magnitude, random, and full masks are provided
//! as baselines.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelSpec};

/// Sorted set of trainable coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    dim: usize,
    support: Arc<[usize]>,
}

impl SparseMask {
    /// `support` must be strictly increasing, in range, and non-empty.
    pub fn new(dim: usize, support: Vec<usize>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::input("mask support must not be empty"));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("mask support must be strictly increasing"));
        }
        if let Some(&last) = support.last() {
            if last >= dim {
                return Err(Error::input(format!("mask index {last} out of range for dim {dim}")));
            }
        }
        Ok(Self {
            dim,
            support: support.into(),
        })
    }

    /// Every coordinate trainable.
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            support: (0..dim).collect(),
        }
    }

    /// Degenerate mask with no trainable coordinate (density 0).
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            support: Arc::from(Vec::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Number of trainable coordinates (the count `s`).
    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    /// Fraction of trainable coordinates (the ratio `u`).
    pub fn density(&self) -> f64 {
        self.support.len() as f64 / self.dim as f64
    }

    pub fn contains(&self, index: usize) -> bool {
        self.support.binary_search(&index).is_ok()
    }

    /// Text form: a `dim=<d> density=<u>` header, then one index per line.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let mut text = format!("dim={} density={}\n", self.dim, self.density());
        for i in self.support.iter() {
            writeln!(text, "{i}").expect("writing to a String cannot fail");
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::input("mask file is empty"))??;
        let mut dim = None;
        let mut density = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("density", v)) => density = v.parse::<f64>().ok(),
                _ => return Err(Error::input(format!("unexpected mask header field {field:?}"))),
            }
        }
        let (dim, density) = match (dim, density) {
            (Some(d), Some(u)) => (d, u),
            _ => return Err(Error::input("mask header needs dim=<d> density=<u>")),
        };
        let mut support = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            support.push(
                line.parse::<usize>()
                    .map_err(|_| Error::input(format!("bad mask index {line:?}")))?,
            );
        }
        let mask = SparseMask::new(dim, support)?;
        if (mask.density() - density).abs() > 1e-12 {
            return Err(Error::input(format!(
                "mask header density {density} disagrees with {} indices over dim {dim}",
                mask.support_len()
            )));
        }
        Ok(mask)
    }
}

/// Values attached to the support of a mask, in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    indices: Arc<[usize]>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn on_mask(mask: &SparseMask, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), mask.support_len(), "one value per support index");
        Self {
            indices: Arc::clone(&mask.support),
            values,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            indices: Arc::clone(&self.indices),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Inner product with a dense vector; only the support contributes.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

/// `max(1, floor(density * dim))`, with a relative guard so products such as
/// `0.001 * 10000` that land a rounding step below an integer are not
/// truncated.
pub fn support_size(density: f64, dim: usize) -> usize {
    let raw = density * dim as f64;
    ((raw * (1.0 + 1e-12)).floor() as usize).clamp(1, dim.max(1))
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::input(format!("mask density {density} must be in (0, 1]")));
    }
    Ok(())
}

/// Elementwise mean of squared gradients over the calibration batches.
pub fn avg_squared_gradients(spec: &ModelSpec, w: &[f64], calib: &[Batch]) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::input("calibration set is empty"));
    }
    let mut acc = vec![0.0; spec.dim()];
    for batch in calib {
        let g = spec.grad(w, batch)?;
        acc.iter_mut().zip(g.iter()).for_each(|(a, v)| *a += v * v);
    }
    let n = calib.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Indices of the `max(1, floor(density * d))` largest scores; ties go to
/// the lower index.
pub fn top_k_mask(scores: &[f64], density: f64) -> Result<SparseMask> {
    check_density(density)?;
    if scores.is_empty() {
        return Err(Error::input("cannot build a mask over zero parameters"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::input(format!("score {i} is not finite")));
    }
    let k = support_size(density, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut support = order[..k].to_vec();
    support.sort_unstable();
    SparseMask::new(scores.len(), support)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Top average squared calibration gradient.
    Meerkat,
    WeightMagnitude,
    Random,
    Full,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Meerkat => "meerkat",
            MaskKind::WeightMagnitude => "weight-magnitude",
            MaskKind::Random => "random",
            MaskKind::Full => "full",
        }
    }
}

/// Masks that do not need gradient information.
pub fn baseline_mask(kind: MaskKind, w: &[f64], density: f64, seed: u64) -> Result<SparseMask> {
    check_density(density)?;
    let dim = w.len();
    match kind {
        MaskKind::Full => Ok(SparseMask::full(dim)),
        MaskKind::WeightMagnitude => {
            let scores: Vec<f64> = w.iter().map(|v| v.abs()).collect();
            top_k_mask(&scores, density)
        }
        MaskKind::Random => {
            let k = support_size(density, dim);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut support = rand::seq::index::sample(&mut rng, dim, k).into_vec();
            support.sort_unstable();
            SparseMask::new(dim, support)
        }
        MaskKind::Meerkat => Err(Error::input(
            "the gradient-ranked mask needs calibration data; use build_mask",
        )),
    }
}

/// Any mask kind; `Meerkat` ranks by average squared gradient over `calib`
/// evaluated at `w`.
pub fn build_mask(
    kind: MaskKind,
    spec: &ModelSpec,
    w: &[f64],
    calib: &[Batch],
    density: f64,
    seed: u64,
) -> Result<SparseMask> {
    match kind {
        MaskKind::Meerkat => {
            check_density(density)?;
            if spec.is_batch_free() {
                let scores = avg_squared_gradients(spec, w, std::slice::from_ref(&Batch::empty()))?;
                top_k_mask(&scores, density)
            } else {
                top_k_mask(&avg_squared_gradients(spec, w, calib)?, density)
            }
        }
        other => baseline_mask(other, w, density, seed),
    }
}

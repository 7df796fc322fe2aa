//! Desk-scale objectives.
//!
//! Every model exposes a forward loss (all a zeroth-order client ever needs)
//! and its exact analytic gradient, which the server side uses for mask
//! selection, the GradIP reference gradient, and test oracles.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::SparseMask;

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A mini-batch of labelled feature rows, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    inputs: Vec<f64>,
    features: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, features: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("batch must contain at least one sample"));
        }
        if inputs.len() != features * labels.len() {
            return Err(Error::input(format!(
                "batch inputs have {} values, expected {} x {}",
                inputs.len(),
                labels.len(),
                features
            )));
        }
        Ok(Self {
            inputs,
            features,
            labels,
        })
    }

    /// A placeholder for objectives that ignore data.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }
}

/// `f(w) = ½ wᵀAw − bᵀw` with `A` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Smallest positive eigenvalue of `A` (the PL constant), if any.
    mu: Option<f64>,
    /// Largest eigenvalue of `A`.
    smoothness: f64,
}

impl Quadratic {
    /// `a` is row-major `dim x dim`.
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let dim = b.len();
        if dim == 0 {
            return Err(Error::config("quadratic dimension must be positive"));
        }
        if a.len() != dim * dim {
            return Err(Error::config(format!(
                "curvature matrix has {} entries, expected {dim}x{dim}",
                a.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::config("quadratic coefficients must be finite"));
        }
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-12 * scale {
                    return Err(Error::config(format!(
                        "curvature matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &a));
        let smoothness = eig.eigenvalues.max().max(0.0);
        let tol = eigen_tolerance(smoothness);
        if eig.eigenvalues.min() < -tol {
            return Err(Error::config(format!(
                "curvature matrix has negative eigenvalue {}",
                eig.eigenvalues.min()
            )));
        }
        let mu = eig
            .eigenvalues
            .iter()
            .copied()
            .filter(|&l| l > tol)
            .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))));
        Ok(Self {
            dim,
            a,
            b,
            mu,
            smoothness,
        })
    }

    /// `A = I`, `b = 0`.
    pub fn isotropic(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self::new(a, vec![0.0; dim]).expect("identity is a valid curvature")
    }

    /// `A = Q diag(spectrum) Qᵀ` for a seeded random rotation `Q`, and
    /// `b = A·minimizer` so that `minimizer` is a global minimizer.
    pub fn with_spectrum(spectrum: &[f64], rotation_seed: u64, minimizer: &[f64]) -> Result<Self> {
        let dim = spectrum.len();
        if minimizer.len() != dim {
            return Err(Error::config("minimizer length must match the spectrum"));
        }
        let q = random_rotation(dim, rotation_seed);
        let a = &q * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let b = &a * DVector::from_column_slice(minimizer);
        let a_rows: Vec<f64> = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)])
            .collect();
        Self::new(a_rows, b.iter().copied().collect())
    }

    /// Average of several quadratics of the same dimension.
    pub fn mean(parts: &[Quadratic]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("cannot average zero quadratics"))?;
        let n = parts.len() as f64;
        let mut a = vec![0.0; first.a.len()];
        let mut b = vec![0.0; first.dim];
        for q in parts {
            if q.dim != first.dim {
                return Err(Error::config("quadratics differ in dimension"));
            }
            a.iter_mut().zip(&q.a).for_each(|(s, v)| *s += v);
            b.iter_mut().zip(&q.b).for_each(|(s, v)| *s += v);
        }
        a.iter_mut().for_each(|v| *v /= n);
        b.iter_mut().for_each(|v| *v /= n);
        Self::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn curvature(&self) -> &[f64] {
        &self.a
    }

    pub fn offset(&self) -> &[f64] {
        &self.b
    }

    pub fn pl_constant(&self) -> Option<f64> {
        self.mu
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn value(&self, w: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.dim {
            let row = &self.a[i * self.dim..(i + 1) * self.dim];
            let aw: f64 = row.iter().zip(w).map(|(a, x)| a * x).sum();
            total += w[i] * (0.5 * aw - self.b[i]);
        }
        total
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let row = &self.a[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - self.b[i]
            })
            .collect()
    }

    /// Global minimizer `A⁺b` and the minimum value, or `None` when `b` has
    /// a component outside the range of `A` (unbounded below).
    pub fn optimum(&self) -> Option<(ParamVector, f64)> {
        let all: Vec<usize> = (0..self.dim).collect();
        self.solve_block(&all, &self.b)
            .map(|w| {
                let w = ParamVector(w);
                let f = self.value(&w);
                (w, f)
            })
    }

    /// Minimizer over the affine subspace that keeps every coordinate off
    /// `mask` at its value in `anchor`.
    pub fn restricted_optimum(&self, mask: &SparseMask, anchor: &[f64]) -> Option<(ParamVector, f64)> {
        let support = mask.support();
        let on: std::collections::HashSet<usize> = support.iter().copied().collect();
        let rhs: Vec<f64> = support
            .iter()
            .map(|&i| {
                let coupled: f64 = (0..self.dim)
                    .filter(|j| !on.contains(j))
                    .map(|j| self.a[i * self.dim + j] * anchor[j])
                    .sum();
                self.b[i] - coupled
            })
            .collect();
        let block = self.solve_block(support, &rhs)?;
        let mut w = anchor.to_vec();
        for (&i, v) in support.iter().zip(block) {
            w[i] = v;
        }
        let f = self.value(&w);
        Some((ParamVector(w), f))
    }

    /// Pseudo-inverse solve of `A[idx, idx] x = rhs`.
    fn solve_block(&self, idx: &[usize], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = idx.len();
        let block = DMatrix::from_fn(n, n, |r, c| self.a[idx[r] * self.dim + idx[c]]);
        let eig = SymmetricEigen::new(block.clone());
        let tol = eigen_tolerance(self.smoothness);
        let rhs = DVector::from_column_slice(rhs);
        let mut x = DVector::zeros(n);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > tol {
                let v = eig.eigenvectors.column(k);
                x += v * (v.dot(&rhs) / lambda);
            }
        }
        let residual = (&block * &x - &rhs).norm();
        (residual <= 1e-8 * (rhs.norm() + 1.0)).then(|| x.iter().copied().collect())
    }
}

fn eigen_tolerance(largest: f64) -> f64 {
    1e-10 * largest.max(1.0)
}

fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the rotation is a deterministic function of `g`.
    let signs = DVector::from_fn(dim, |i, _| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 });
    DMatrix::from_fn(dim, dim, |i, j| q[(i, j)] * signs[j])
}

/// Fully connected softmax classifier. `sizes = [inputs, hidden.., classes]`;
/// hidden layers use `tanh`. With no hidden layers this is multinomial
/// logistic regression.
///
/// Parameter layout, layer by layer: weights `out x in` row-major, then the
/// `out` biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    sizes: Vec<usize>,
}

impl Network {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("network needs input and output sizes"));
        }
        if sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::config("classifier loss needs a non-empty batch"));
        }
        if batch.features() != self.inputs() {
            return Err(Error::config(format!(
                "batch has {} features, model expects {}",
                batch.features(),
                self.inputs()
            )));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.classes()) {
            return Err(Error::config(format!(
                "label {y} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Runs every layer; returns per-layer activations (input first, logits last).
    fn forward(&self, w: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        acts.push(x.to_vec());
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let weights = &w[offset..offset + n_out * n_in];
            let bias = &w[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            let prev = acts.last().unwrap();
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| {
                    weights[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(prev)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + bias[o]
                })
                .collect();
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
            offset += n_out * (n_in + 1);
        }
    }

    fn loss(&self, w: &[f64], batch: &Batch) -> f64 {
        let mut acts = Vec::with_capacity(self.sizes.len());
        let total: f64 = (0..batch.len())
            .map(|i| {
                self.forward(w, batch.row(i), &mut acts);
                let logits = acts.last().unwrap();
                log_sum_exp(logits) - logits[batch.labels()[i]]
            })
            .sum();
        total / batch.len() as f64
    }

    fn gradient(&self, w: &[f64], batch: &Batch) -> Vec<f64> {
        let mut grad = vec![0.0; w.len()];
        let mut acts = Vec::with_capacity(self.sizes.len());
        let layers = self.sizes.len() - 1;
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |off, p| {
                let start = *off;
                *off += p[1] * (p[0] + 1);
                Some(start)
            })
            .collect();
        for i in 0..batch.len() {
            self.forward(w, batch.row(i), &mut acts);
            // dL/dlogits = softmax - onehot
            let logits = &acts[layers];
            let lse = log_sum_exp(logits);
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            delta[batch.labels()[i]] -= 1.0;
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let off = offsets[l];
                let prev = &acts[l];
                for o in 0..n_out {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    row.iter_mut().zip(prev).for_each(|(g, a)| *g += delta[o] * a);
                    grad[off + n_out * n_in + o] += delta[o];
                }
                if l > 0 {
                    let weights = &w[off..off + n_out * n_in];
                    delta = (0..n_in)
                        .map(|j| {
                            let back: f64 = (0..n_out).map(|o| weights[o * n_in + j] * delta[o]).sum();
                            back * (1.0 - prev[j] * prev[j])
                        })
                        .collect();
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        grad
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::with_capacity(self.dim());
        for pair in self.sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let scale = (1.0 / n_in as f64).sqrt();
            for _ in 0..n_out * n_in {
                let z: f64 = StandardNormal.sample(&mut rng);
                w.push(scale * z);
            }
            w.extend(std::iter::repeat_n(0.0, n_out));
        }
        w
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The objective a client optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Batch-independent PL quadratic.
    PlQuadratic(Quadratic),
    /// Multinomial logistic regression (network without hidden layers).
    Logistic(Network),
    /// `tanh` multilayer perceptron.
    Mlp(Network),
}

impl ModelSpec {
    pub fn logistic(features: usize, classes: usize) -> Result<Self> {
        Ok(ModelSpec::Logistic(Network::new(vec![features, classes])?))
    }

    pub fn mlp(features: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config("mlp needs at least one hidden layer"));
        }
        let mut sizes = vec![features];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Ok(ModelSpec::Mlp(Network::new(sizes)?))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::PlQuadratic(_) => "pl-quadratic",
            ModelSpec::Logistic(_) => "logistic",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::PlQuadratic(q) => q.dim(),
            ModelSpec::Logistic(n) | ModelSpec::Mlp(n) => n.dim(),
        }
    }

    /// Whether `loss` ignores its batch argument.
    pub fn is_batch_free(&self) -> bool {
        matches!(self, ModelSpec::PlQuadratic(_))
    }

    /// Starting point: zeros for quadratic and logistic models, the seeded
    /// `N(0, 1/fan_in)` draw for an MLP.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self {
            ModelSpec::PlQuadratic(q) => ParamVector::zeros(q.dim()),
            ModelSpec::Logistic(n) => ParamVector::zeros(n.dim()),
            ModelSpec::Mlp(n) => ParamVector(n.init(seed)),
        }
    }

    fn check(&self, w: &[f64], batch: &Batch) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::config(format!(
                "parameter vector has length {}, {} model has dimension {}",
                w.len(),
                self.kind(),
                self.dim()
            )));
        }
        match self {
            ModelSpec::PlQuadratic(_) => Ok(()),
            ModelSpec::Logistic(n) | ModelSpec::Mlp(n) => n.check(batch),
        }
    }

    pub fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64> {
        self.check(w, batch)?;
        Ok(match self {
            ModelSpec::PlQuadratic(q) => q.value(w),
            ModelSpec::Logistic(n) | ModelSpec::Mlp(n) => n.loss(w, batch),
        })
    }

    pub fn grad(&self, w: &[f64], batch: &Batch) -> Result<ParamVector> {
        self.check(w, batch)?;
        Ok(ParamVector(match self {
            ModelSpec::PlQuadratic(q) => q.gradient(w),
            ModelSpec::Logistic(n) | ModelSpec::Mlp(n) => n.gradient(w, batch),
        }))
    }

    /// Sample-weighted mean loss over several batches.
    pub fn dataset_loss(&self, w: &[f64], batches: &[Batch]) -> Result<f64> {
        if self.is_batch_free() || batches.is_empty() {
            return self.loss(w, &Batch::empty());
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for b in batches {
            total += self.loss(w, b)? * b.len() as f64;
            count += b.len();
        }
        Ok(total / count as f64)
    }
}

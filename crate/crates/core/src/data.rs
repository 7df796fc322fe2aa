//! Synthetic classification data and client partitions.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Default batch size.
pub const DEFAULT_BATCH_SIZE: usize = 16;
/// Fraction carved off as the calibration ("pre-training") split.
pub const DEFAULT_HOLDOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    features: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, features: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("dataset must contain at least one sample"));
        }
        if inputs.len() != labels.len() * features {
            return Err(Error::input("dataset inputs do not match labels x features"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            features,
            labels,
            num_classes,
        })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.features);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        Batch::new(inputs, self.features, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let b = self.batch(indices)?;
        Dataset::new(
            indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            self.features,
            b.labels().to_vec(),
            self.num_classes,
        )
    }

    /// Label counts over `indices`.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// CSV with columns `f0..f{F-1},label`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.features).map(|j| format!("f{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", row.join(","), self.labels[i])?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead, num_classes: usize) -> Result<Dataset> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::input("dataset CSV is empty"))??;
        let columns = header.split(',').count();
        if columns < 2 || header.split(',').next_back() != Some("label") {
            return Err(Error::input("dataset CSV header must end with a label column"));
        }
        let features = columns - 1;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns {
                return Err(Error::input(format!("row {} has {} columns", n + 1, fields.len())));
            }
            for f in &fields[..features] {
                inputs.push(f.trim().parse::<f64>().map_err(|_| Error::input(format!("bad value {f:?}")))?);
            }
            let y = fields[features].trim();
            labels.push(y.parse::<usize>().map_err(|_| Error::input(format!("bad label {y:?}")))?);
        }
        Dataset::new(inputs, features, labels, num_classes)
    }
}

/// Gaussian class clusters. Class `c` is centred on `(1 + c / F) e_{c mod F}`,
/// so means are distinct and at least unit distance apart; samples add
/// `spread * N(0, I)`. Samples are stored class by class.
pub fn make_blobs(classes: usize, per_class: usize, features: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::input("blobs need at least two classes"));
    }
    if per_class == 0 || features == 0 {
        return Err(Error::input("blobs need positive per_class and feature counts"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::input("blob spread must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(classes * per_class * features);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let scale = 1.0 + (c / features) as f64;
        for _ in 0..per_class {
            for j in 0..features {
                let centre = if j == c % features { scale } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs.push(centre + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, features, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
    /// Client `k` receives label `k mod C` (pure when `K >= C`).
    SingleLabel,
    /// The first `iid_clients` clients share an IID slice sized in
    /// proportion to their count; the rest are single-label over the
    /// remainder.
    Mixed { iid_clients: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        match self.kind {
            PartitionKind::Dirichlet { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                Err(Error::config(format!("dirichlet alpha must be positive, got {alpha}")))
            }
            PartitionKind::Mixed { iid_clients } if iid_clients > self.clients => Err(Error::config(
                "mixed partition has more IID clients than clients",
            )),
            _ => Ok(()),
        }
    }
}

/// Disjoint client index lists covering `0..N`.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let k = spec.clients;
    let n = ds.len();
    if k > n {
        return Err(Error::input(format!("{k} clients but only {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut all: Vec<usize> = (0..n).collect();
    let mut parts = match spec.kind {
        PartitionKind::Iid => {
            all.shuffle(&mut rng);
            split_even(&all, k)
        }
        PartitionKind::Dirichlet { alpha } => dirichlet_split(ds, k, alpha, &mut rng)?,
        PartitionKind::SingleLabel => by_label(ds, &all, k, &mut rng),
        PartitionKind::Mixed { iid_clients } => {
            all.shuffle(&mut rng);
            let iid_share = if iid_clients == k {
                n
            } else {
                (n as f64 * iid_clients as f64 / k as f64).round() as usize
            };
            let (iid, rest) = all.split_at(iid_share);
            let mut parts = split_even(iid, iid_clients);
            let mut rest = rest.to_vec();
            rest.sort_unstable();
            parts.extend(by_label(ds, &rest, k - iid_clients, &mut rng));
            parts
        }
    };
    fill_empty(&mut parts);
    Ok(parts)
}

fn split_even(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = indices.len();
    (0..k)
        .map(|c| indices[c * n / k..(c + 1) * n / k].to_vec())
        .collect()
}

/// Label `c` goes to the clients `j` with `j mod C == c` (round robin), or to
/// client `c mod k` when there are fewer clients than labels.
fn by_label(ds: &Dataset, indices: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let classes = ds.num_classes();
    let mut parts = vec![Vec::new(); k];
    if k == 0 {
        return parts;
    }
    for c in 0..classes {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| ds.labels()[i] == c).collect();
        members.shuffle(rng);
        let mut recipients: Vec<usize> = (0..k).filter(|j| j % classes == c).collect();
        if recipients.is_empty() {
            recipients.push(c % k);
        }
        for (pos, i) in members.into_iter().enumerate() {
            parts[recipients[pos % recipients.len()]].push(i);
        }
    }
    parts
}

fn dirichlet_split(ds: &Dataset, k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("dirichlet alpha: {e}")))?;
    let mut parts = vec![Vec::new(); k];
    for c in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let m = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (client, d) in draws.iter().enumerate() {
            cumulative += if total > 0.0 { d / total } else { 1.0 / k as f64 };
            let end = if client + 1 == k {
                m
            } else {
                ((cumulative * m as f64).round() as usize).clamp(start, m)
            };
            parts[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    Ok(parts)
}

/// Moves one sample from the largest client into each empty one.
fn fill_empty(parts: &mut [Vec<usize>]) {
    while let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        let largest = (0..parts.len())
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        if parts[largest].len() < 2 {
            break;
        }
        let moved = parts[largest].pop().expect("non-empty");
        parts[empty].push(moved);
    }
}

/// Seeded shuffle of `indices`, chunked into batches; the last may be short.
pub fn batches(ds: &Dataset, indices: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    if indices.is_empty() {
        return Err(Error::input("cannot batch an empty index list"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(|chunk| ds.batch(chunk)).collect()
}

/// Splits `0..n` into a held-out calibration split of `round(fraction * n)`
/// samples (at least one) and the remainder, both sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("holdout fraction {fraction} must be in (0, 1)")));
    }
    let take = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if take == 0 || take >= n {
        return Err(Error::input("dataset too small for a holdout split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = order[..take].to_vec();
    let mut rest = order[take..].to_vec();
    held.sort_unstable();
    rest.sort_unstable();
    Ok((held, rest))
}

/// Total-variation distance between a label histogram and uniform.
pub fn tv_from_uniform(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let u = 1.0 / histogram.len() as f64;
    0.5 * histogram.iter().map(|&c| (c as f64 / total as f64 - u).abs()).sum::<f64>()
}

use std::sync::Arc;

use super::config::{DataConfig, ExperimentConfig, ModelConfig};
use crate::data::{batches, holdout_split, make_blobs, partition, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::fed::{ClientState, Evaluator, Federation, RoundConfig, ServerState};
use crate::gradip::pretrain_gradient;
use crate::masking::{build_mask, MaskKind, SparseMask};
use crate::model::{Batch, ModelSpec, ParamVector, Quadratic};
use crate::prng::{mix64, GaussianStream, SeedSchedule};

const DATA: u64 = 1;
const HOLDOUT: u64 = 2;
const PARTITION: u64 = 3;
const BATCHES: u64 = 4;
const INIT: u64 = 5;
const MASK: u64 = 6;
const ROTATION: u64 = 7;
const SHIFT: u64 = 8;
const MINIMIZER: u64 = 9;

/// Independent seed for one purpose (and index) under a master seed.
pub fn sub_seed(master: u64, purpose: u64, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(purpose)) ^ index)
}

/// Everything derived from a config before any training happens.
#[derive(Debug, Clone)]
pub struct Setup {
    pub master_seed: u64,
    /// The federated objective: the average client objective.
    pub global_spec: Arc<ModelSpec>,
    pub client_specs: Vec<Arc<ModelSpec>>,
    pub client_batches: Vec<Vec<Batch>>,
    /// Held-out batches for mask ranking and the calibration gradient.
    pub calibration: Vec<Batch>,
    /// Label histogram per client; empty for batch-free objectives.
    pub label_histograms: Vec<Vec<usize>>,
    pub w0: ParamVector,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let master = cfg.master_seed;
        let k = cfg.round.clients;
        match &cfg.model {
            ModelConfig::PlQuadratic { dim, condition, heterogeneity } => {
                let parts = quadratic_clients(*dim, *condition, *heterogeneity, k, master)?;
                let global = Arc::new(ModelSpec::PlQuadratic(Quadratic::mean(&parts)?));
                let w0 = global.init_params(sub_seed(master, INIT, 0));
                Ok(Self {
                    master_seed: master,
                    client_specs: parts.into_iter().map(|q| Arc::new(ModelSpec::PlQuadratic(q))).collect(),
                    client_batches: vec![Vec::new(); k],
                    calibration: Vec::new(),
                    label_histograms: Vec::new(),
                    global_spec: global,
                    w0,
                })
            }
            ModelConfig::Logistic { features, classes } => {
                let spec = ModelSpec::logistic(*features, *classes)?;
                Self::classifier(spec, *features, *classes, data_of(cfg)?, k, master)
            }
            ModelConfig::Mlp { features, hidden, classes } => {
                let spec = ModelSpec::mlp(*features, hidden, *classes)?;
                Self::classifier(spec, *features, *classes, data_of(cfg)?, k, master)
            }
        }
    }

    fn classifier(
        spec: ModelSpec,
        features: usize,
        classes: usize,
        data: &DataConfig,
        clients: usize,
        master: u64,
    ) -> Result<Self> {
        let ds = make_blobs(classes, data.per_class, features, data.spread, sub_seed(master, DATA, 0))?;
        let ds = if data.scale == 1.0 && data.offset == 0.0 {
            ds
        } else {
            let inputs = (0..ds.len())
                .flat_map(|i| ds.row(i).iter().map(|v| (v + data.offset) * data.scale))
                .collect();
            Dataset::new(inputs, features, ds.labels().to_vec(), classes)?
        };
        let (held, rest) = holdout_split(ds.len(), data.holdout, sub_seed(master, HOLDOUT, 0))?;
        let calibration = batches(&ds, &held, data.batch_size, sub_seed(master, HOLDOUT, 1))?;
        let train = ds.subset(&rest)?;
        let parts = partition(
            &train,
            &PartitionSpec {
                kind: data.partition,
                clients,
                seed: sub_seed(master, PARTITION, 0),
            },
        )?;
        let client_batches = parts
            .iter()
            .enumerate()
            .map(|(c, idx)| batches(&train, idx, data.batch_size, sub_seed(master, BATCHES, c as u64)))
            .collect::<Result<Vec<_>>>()?;
        let label_histograms = parts.iter().map(|idx| train.label_histogram(idx)).collect();
        let spec = Arc::new(spec);
        Ok(Self {
            master_seed: master,
            w0: spec.init_params(sub_seed(master, INIT, 0)),
            client_specs: vec![Arc::clone(&spec); clients],
            global_spec: spec,
            client_batches,
            calibration,
            label_histograms,
        })
    }

    /// Batches of every client, in client order.
    pub fn training_batches(&self) -> Vec<Batch> {
        self.client_batches.iter().flatten().cloned().collect()
    }

    pub fn mask(&self, kind: MaskKind, density: f64) -> Result<SparseMask> {
        build_mask(
            kind,
            &self.global_spec,
            &self.w0,
            &self.calibration,
            density,
            sub_seed(self.master_seed, MASK, 0),
        )
    }

    /// The calibration ("pre-training") gradient at the starting point.
    pub fn pretrain_gradient(&self) -> Result<ParamVector> {
        if self.global_spec.is_batch_free() {
            pretrain_gradient(&self.global_spec, &self.w0, std::slice::from_ref(&Batch::empty()))
        } else {
            pretrain_gradient(&self.global_spec, &self.w0, &self.calibration)
        }
    }

    /// Lowest objective value reachable from `w0` while moving only the
    /// masked coordinates, when it can be computed.
    pub fn restricted_optimum(&self, mask: &SparseMask) -> Option<f64> {
        match &*self.global_spec {
            ModelSpec::PlQuadratic(q) => q.restricted_optimum(mask, &self.w0).map(|(_, f)| f),
            _ => None,
        }
    }

    /// Unrestricted optimal value, when it can be computed.
    pub fn global_optimum(&self) -> Option<f64> {
        match &*self.global_spec {
            ModelSpec::PlQuadratic(q) => q.optimum().map(|(_, f)| f),
            _ => None,
        }
    }

    pub fn evaluator(&self, mask: &SparseMask) -> Evaluator {
        Evaluator {
            spec: Arc::clone(&self.global_spec),
            batches: self.training_batches(),
            optimum: self.restricted_optimum(mask),
        }
    }

    pub fn federation(&self, config: RoundConfig, mask: SparseMask) -> Result<Federation> {
        if self.client_specs.len() != config.clients {
            return Err(Error::config("round.clients differs from the built population"));
        }
        let evaluator = self.evaluator(&mask);
        let server = ServerState {
            global_params: self.w0.clone(),
            mask,
            schedule: SeedSchedule::new(self.master_seed),
            round: 0,
        };
        let clients = self
            .client_specs
            .iter()
            .zip(&self.client_batches)
            .enumerate()
            .map(|(id, (spec, b))| ClientState::new(id, Arc::clone(spec), b.clone(), self.w0.clone()))
            .collect();
        Federation::new(config, server, clients, evaluator)
    }
}

fn data_of(cfg: &ExperimentConfig) -> Result<&DataConfig> {
    cfg.data
        .as_ref()
        .ok_or_else(|| Error::config("data is required for classifier models"))
}

fn quadratic_clients(dim: usize, condition: f64, heterogeneity: f64, clients: usize, master: u64) -> Result<Vec<Quadratic>> {
    let lo = 1.0 / condition;
    let spectrum: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                1.0
            } else {
                lo + (1.0 - lo) * i as f64 / (dim - 1) as f64
            }
        })
        .collect();
    let base: Vec<f64> = GaussianStream::new(sub_seed(master, MINIMIZER, 0)).take(dim).collect();
    (0..clients)
        .map(|k| {
            if heterogeneity == 0.0 {
                Quadratic::with_spectrum(&spectrum, sub_seed(master, ROTATION, 0), &base)
            } else {
                let shift = GaussianStream::new(sub_seed(master, SHIFT, k as u64));
                let minimizer: Vec<f64> = base.iter().zip(shift).map(|(b, s)| b + heterogeneity * s).collect();
                Quadratic::with_spectrum(&spectrum, sub_seed(master, ROTATION, k as u64), &minimizer)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_cfg(partition: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"version": 1, "master_seed": 3,
                "model": {{"kind": "logistic", "features": 4, "classes": 4}},
                "data": {{"per_class": 50, "partition": {partition}}},
                "mask": {{"density": 0.25}},
                "round": {{"local_steps": 2, "rounds": 2, "clients": 4}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn classifier_setup_holds_out_calibration_data() {
        let setup = Setup::build(&logistic_cfg(r#"{"kind": "iid"}"#)).unwrap();
        let held: usize = setup.calibration.iter().map(Batch::len).sum();
        let train: usize = setup.client_batches.iter().flatten().map(Batch::len).sum();
        assert_eq!(held, 20);
        assert_eq!(held + train, 200);
        assert_eq!(setup.label_histograms.len(), 4);
    }

    #[test]
    fn single_label_clients_hold_one_label() {
        let setup = Setup::build(&logistic_cfg(r#"{"kind": "single-label"}"#)).unwrap();
        for (k, h) in setup.label_histograms.iter().enumerate() {
            assert_eq!(h.iter().filter(|&&n| n > 0).count(), 1);
            assert!(h[k] > 0);
        }
    }

    #[test]
    fn setups_are_deterministic() {
        let cfg = logistic_cfg(r#"{"kind": "dirichlet", "alpha": 0.5}"#);
        let (a, b) = (Setup::build(&cfg).unwrap(), Setup::build(&cfg).unwrap());
        assert_eq!(a.client_batches, b.client_batches);
        assert_eq!(a.mask(MaskKind::Meerkat, 0.25).unwrap(), b.mask(MaskKind::Meerkat, 0.25).unwrap());
    }

    #[test]
    fn homogeneous_quadratic_clients_coincide() {
        let qs = quadratic_clients(5, 10.0, 0.0, 3, 1).unwrap();
        assert!(qs.windows(2).all(|w| w[0] == w[1]));
        let qs = quadratic_clients(5, 10.0, 1.0, 3, 1).unwrap();
        assert!(qs[0] != qs[1]);
        assert!((qs[0].pl_constant().unwrap() - 0.1).abs() < 1e-9);
        assert!((qs[0].smoothness() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sub_seeds_differ_by_purpose_and_index() {
        let seeds = [sub_seed(1, DATA, 0), sub_seed(1, DATA, 1), sub_seed(1, INIT, 0), sub_seed(2, DATA, 0)];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}

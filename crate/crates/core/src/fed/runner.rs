use std::sync::Arc;

use super::cost::{round_cost, CommCost};
use super::metrics::{MetricsSeries, RoundRecord};
use super::protocol::{high_frequency_round, multi_step_round, ClientState, RoundConfig, ServerState, SyncMode};
use crate::error::{Error, PerturbationSign, Result};
use crate::model::{Batch, ModelSpec, ParamVector};

/// Scores the global model after every round.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub spec: Arc<ModelSpec>,
    /// Evaluation data; ignored by batch-free objectives.
    pub batches: Vec<Batch>,
    /// Optimal value used as the gap reference, when known.
    pub optimum: Option<f64>,
}

impl Evaluator {
    pub fn loss(&self, w: &ParamVector) -> Result<f64> {
        self.spec.dataset_loss(w, &self.batches)
    }
}

/// A complete simulated federation: one server, `K` clients, and the
/// per-client local step counts currently in force.
#[derive(Debug, Clone)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub config: RoundConfig,
    pub evaluator: Evaluator,
    local_steps: Vec<usize>,
    flagged: Vec<usize>,
}

impl Federation {
    pub fn new(
        config: RoundConfig,
        server: ServerState,
        mut clients: Vec<ClientState>,
        evaluator: Evaluator,
    ) -> Result<Self> {
        config.validate()?;
        if clients.len() != config.clients {
            return Err(Error::config(format!(
                "config has {} clients but {} were built",
                config.clients,
                clients.len()
            )));
        }
        let d = server.global_params.len();
        if server.mask.dim() != d {
            return Err(Error::config("mask dimension differs from the model dimension"));
        }
        if evaluator.spec.dim() != d {
            return Err(Error::config("evaluator dimension differs from the model dimension"));
        }
        for (i, c) in clients.iter_mut().enumerate() {
            if c.id != i {
                return Err(Error::config("client ids must be 0..K in order"));
            }
            if c.spec.dim() != d {
                return Err(Error::config(format!("client {i} model dimension differs")));
            }
            c.params = server.global_params.clone();
        }
        Ok(Self {
            local_steps: vec![config.local_steps; config.clients],
            flagged: Vec::new(),
            server,
            clients,
            config,
            evaluator,
        })
    }

    pub fn local_steps(&self) -> &[usize] {
        &self.local_steps
    }

    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    /// Installs per-client local step counts, e.g. from an early-stopping
    /// policy; `flagged` is recorded in the metrics.
    pub fn set_local_steps(&mut self, steps: Vec<usize>, flagged: Vec<usize>) -> Result<()> {
        if steps.len() != self.clients.len() {
            return Err(Error::config("one local step count per client is required"));
        }
        if steps.iter().any(|&t| t == 0 || t > u32::MAX as usize) {
            return Err(Error::config("local step counts must be at least 1"));
        }
        if self.config.mode == SyncMode::HighFrequency && steps.iter().any(|&t| t != 1) {
            return Err(Error::config("high-frequency mode requires one local step"));
        }
        self.local_steps = steps;
        self.flagged = flagged;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Keep every round's uploaded scalars in the metrics.
    pub keep_logs: bool,
    /// Check each replayed virtual path against the client's actual model.
    pub verify_paths: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            keep_logs: false,
            verify_paths: true,
        }
    }
}

/// A run that stopped early, with the metrics gathered up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: MetricsSeries,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} rounds)", self.error, self.partial.records.len().saturating_sub(1))
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Executes `config.rounds` rounds and records per-round metrics.
pub fn run_federation(fed: &mut Federation, opts: &RunOptions) -> Result<MetricsSeries, Box<RunFailure>> {
    let mut metrics = MetricsSeries {
        flagged: fed.flagged.clone(),
        ..Default::default()
    };
    let fail = |error: Error, partial: MetricsSeries| Box::new(RunFailure { error, partial });

    let initial = match evaluate(fed) {
        Ok(loss) => loss,
        Err(e) => return Err(fail(e, metrics)),
    };
    metrics.records.push(record(fed, 0, initial, CommCost::default()));

    let support = fed.server.mask.support_len();
    let mut total = CommCost::default();
    for round in 1..=fed.config.rounds {
        let zo = fed.config.zo;
        let outcome = match fed.config.mode {
            SyncMode::MultiStep => multi_step_round(
                &mut fed.server,
                &mut fed.clients,
                &fed.local_steps,
                &zo,
                opts.verify_paths,
            ),
            SyncMode::HighFrequency => high_frequency_round(&mut fed.server, &mut fed.clients, &zo),
        };
        let logs = match outcome {
            Ok(logs) => logs,
            Err(e) => return Err(fail(e, metrics)),
        };
        for log in &logs {
            total += round_cost(fed.config.mode, log.scalars.len(), support);
        }
        if opts.keep_logs {
            metrics.logs.extend(logs);
        }
        match evaluate(fed) {
            Ok(loss) => metrics.records.push(record(fed, round, loss, total)),
            Err(e) => return Err(fail(e, metrics)),
        }
    }
    Ok(metrics)
}

fn evaluate(fed: &Federation) -> Result<f64> {
    let loss = fed.evaluator.loss(&fed.server.global_params)?;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            sign: PerturbationSign::Plus,
            client: None,
            step: None,
        });
    }
    Ok(loss)
}

fn record(fed: &Federation, round: usize, loss: f64, total: CommCost) -> RoundRecord {
    RoundRecord {
        round,
        global_loss: loss,
        gap: fed.evaluator.optimum.map(|f| loss - f),
        up_bytes: total.uplink,
        down_bytes: total.downlink,
    }
}

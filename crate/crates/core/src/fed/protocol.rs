use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::SparseMask;
use crate::model::{Batch, ModelSpec, ParamVector};
use crate::prng::{masked_gaussian, SeedSchedule};
use crate::zo::{apply_update, local_step, projected_gradient, ZoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    MultiStep,
    HighFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    /// Local steps per round, `T`.
    pub local_steps: usize,
    /// Rounds, `R`.
    pub rounds: usize,
    /// Clients, `K`.
    pub clients: usize,
    pub mode: SyncMode,
    pub zo: ZoConfig,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.local_steps > u32::MAX as usize {
            return Err(Error::config("local_steps must be at least 1"));
        }
        if self.rounds >= u32::MAX as usize {
            return Err(Error::config("too many rounds"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients must be at least 1"));
        }
        if self.mode == SyncMode::HighFrequency && self.local_steps != 1 {
            return Err(Error::config("high-frequency mode requires local_steps = 1"));
        }
        self.zo.validate()
    }
}

/// What a client holds between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub spec: Arc<ModelSpec>,
    /// Fixed batch order; consumed cyclically.
    pub batches: Arc<[Batch]>,
    pub params: ParamVector,
    /// Index of the next batch to consume.
    pub data_pointer: usize,
}

impl ClientState {
    pub fn new(id: usize, spec: Arc<ModelSpec>, batches: Vec<Batch>, params: ParamVector) -> Self {
        Self {
            id,
            spec,
            batches: batches.into(),
            params,
            data_pointer: 0,
        }
    }

    fn take_batch(&mut self) -> Batch {
        if self.batches.is_empty() {
            return Batch::empty();
        }
        let batch = self.batches[self.data_pointer].clone();
        self.data_pointer = (self.data_pointer + 1) % self.batches.len();
        batch
    }

    fn peek_batch(&self) -> &Batch {
        static EMPTY: std::sync::OnceLock<Batch> = std::sync::OnceLock::new();
        if self.batches.is_empty() {
            EMPTY.get_or_init(Batch::empty)
        } else {
            &self.batches[self.data_pointer]
        }
    }

    fn advance(&mut self) {
        if !self.batches.is_empty() {
            self.data_pointer = (self.data_pointer + 1) % self.batches.len();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_params: ParamVector,
    pub mask: SparseMask,
    pub schedule: SeedSchedule,
    /// Rounds completed so far.
    pub round: u32,
}

/// The scalars one client uploads for one round, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGradientLog {
    pub client_id: usize,
    pub round: u32,
    pub scalars: Vec<f64>,
}

/// Shared inputs of a local update loop.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub mask: &'a SparseMask,
    pub schedule: &'a SeedSchedule,
    pub zo: &'a ZoConfig,
}

/// Runs `steps` local steps from `global_params` and returns the uploaded
/// scalars. Batches are consumed cyclically from the client's pointer.
pub fn client_round(
    client: &mut ClientState,
    global_params: &ParamVector,
    round: u32,
    steps: usize,
    ctx: StepContext<'_>,
) -> Result<ProjectedGradientLog> {
    if steps == 0 {
        return Err(Error::config("a client round needs at least one local step"));
    }
    client.params = global_params.clone();
    let mut scalars = Vec::with_capacity(steps);
    for t in 1..=steps {
        let seed = ctx.schedule.derive_seed(round, t as u32);
        let batch = client.take_batch();
        let (next, g) = local_step(&client.spec, &client.params, ctx.mask, seed, ctx.zo, &batch)
            .map_err(|e| e.at(client.id, t))?;
        client.params = next;
        scalars.push(g);
    }
    Ok(ProjectedGradientLog {
        client_id: client.id,
        round,
        scalars,
    })
}

/// Server-side replay of a client's local path from its scalars.
pub fn reconstruct_virtual_path(
    global_params: &ParamVector,
    log: &ProjectedGradientLog,
    mask: &SparseMask,
    schedule: &SeedSchedule,
    eta: f64,
) -> ParamVector {
    let mut w = global_params.clone();
    for (t, &g) in log.scalars.iter().enumerate() {
        let z = masked_gaussian(schedule.derive_seed(log.round, t as u32 + 1), mask);
        apply_update(&mut w, &z, eta, g);
    }
    w
}

/// Coordinate-wise mean, summed in list order. Coordinates on which every
/// vector agrees bit-for-bit are copied rather than averaged, so values
/// shared by all clients survive exactly.
pub fn aggregate(params_list: &[ParamVector]) -> Result<ParamVector> {
    let first = params_list
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let d = first.len();
    if let Some(p) = params_list.iter().find(|p| p.len() != d) {
        return Err(Error::Protocol(format!(
            "aggregating vectors of length {} and {d}",
            p.len()
        )));
    }
    let k = params_list.len() as f64;
    let out: Vec<f64> = (0..d)
        .map(|i| {
            let v0 = first[i];
            if params_list.iter().all(|p| p[i].to_bits() == v0.to_bits()) {
                v0
            } else {
                params_list.iter().map(|p| p[i]).sum::<f64>() / k
            }
        })
        .collect();
    Ok(ParamVector::from(out))
}

/// Per-step mean of the uploaded scalars over all `clients`, summed in
/// ascending client order. Clients that stopped early contribute nothing to
/// the later steps, exactly as if they had uploaded zeros.
pub fn average_scalars(logs: &[ProjectedGradientLog], clients: usize) -> Vec<f64> {
    let steps = logs.iter().map(|l| l.scalars.len()).max().unwrap_or(0);
    let k = clients as f64;
    (0..steps)
        .map(|t| {
            logs.iter()
                .filter_map(|l| l.scalars.get(t))
                .fold(0.0, |acc, g| acc + g)
                / k
        })
        .collect()
}

/// The aggregated global model for a multi-step round.
///
/// All clients in a round share the seed list, so each client's replayed
/// model is `w − η Σ_t g_k^t z̄_t`, and their mean is `w − η Σ_t ḡ^t z̄_t`
/// with `ḡ^t` the client-averaged scalar. The server applies that directly.
/// With one local step this is the same arithmetic as the high-frequency
/// update, which keeps the two modes bit-identical.
pub fn replay_average(
    global_params: &ParamVector,
    logs: &[ProjectedGradientLog],
    clients: usize,
    round: u32,
    mask: &SparseMask,
    schedule: &SeedSchedule,
    eta: f64,
) -> ParamVector {
    let log = ProjectedGradientLog {
        client_id: usize::MAX,
        round,
        scalars: average_scalars(logs, clients),
    };
    reconstruct_virtual_path(global_params, &log, mask, schedule, eta)
}

#[cfg(feature = "parallel")]
fn map_clients<T, F>(clients: &mut [ClientState], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ClientState) -> T + Sync + Send,
{
    use rayon::prelude::*;
    clients.par_iter_mut().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_clients<T, F>(clients: &mut [ClientState], f: F) -> Vec<T>
where
    F: Fn(&mut ClientState) -> T,
{
    clients.iter_mut().map(f).collect()
}

/// One multi-step round: local loops, virtual-path check, aggregation.
///
/// `steps[k]` is client `k`'s local step count. When `verify` is set, the
/// server's replay of every client is compared bit-for-bit with the model
/// the client actually holds.
pub fn multi_step_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    steps: &[usize],
    zo: &ZoConfig,
    verify: bool,
) -> Result<Vec<ProjectedGradientLog>> {
    let round = server.round + 1;
    let ctx = StepContext {
        mask: &server.mask,
        schedule: &server.schedule,
        zo,
    };
    let global = &server.global_params;
    let logs: Vec<ProjectedGradientLog> =
        map_clients(clients, |c| client_round(c, global, round, steps[c.id], ctx))
            .into_iter()
            .collect::<Result<_>>()?;

    if verify {
        for (client, log) in clients.iter().zip(&logs) {
            let replayed = reconstruct_virtual_path(global, log, &server.mask, &server.schedule, zo.eta);
            if !replayed.bit_eq(&client.params) {
                return Err(Error::Protocol(format!(
                    "virtual path of client {} diverged in round {round}",
                    client.id
                )));
            }
        }
    }

    server.global_params = replay_average(
        global,
        &logs,
        clients.len(),
        round,
        &server.mask,
        &server.schedule,
        zo.eta,
    );
    server.round = round;
    Ok(logs)
}

/// One high-frequency round: every client evaluates the shared direction on
/// its next batch, the server averages the scalars, and server and clients
/// apply the identical update. Returns the per-client scalars.
pub fn high_frequency_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    zo: &ZoConfig,
) -> Result<Vec<ProjectedGradientLog>> {
    let round = server.round + 1;
    let z = masked_gaussian(server.schedule.derive_seed(round, 1), &server.mask);
    let logs: Vec<ProjectedGradientLog> = map_clients(clients, |c| {
        let g = projected_gradient(&c.spec, &c.params, &z, zo.epsilon, c.peek_batch())
            .map_err(|e| e.at(c.id, 1))?;
        c.advance();
        Ok(ProjectedGradientLog {
            client_id: c.id,
            round,
            scalars: vec![g],
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let g = average_scalars(&logs, clients.len())[0];
    apply_update(&mut server.global_params, &z, zo.eta, g);
    for c in clients.iter_mut() {
        apply_update(&mut c.params, &z, zo.eta, g);
        if !c.params.bit_eq(&server.global_params) {
            return Err(Error::Protocol(format!(
                "client {} out of sync after round {round}",
                c.id
            )));
        }
    }
    server.round = round;
    Ok(logs)
}

//! Byte accounting for one client in one round.
//!
//! Encodings: a scalar or a parameter value is 8 bytes, a seed is 8 bytes,
//! an index is 4 bytes. Mask indices never travel (the mask is static and
//! shipped with the initial model), so sparse parameters cost 8 bytes each.

use super::protocol::{RoundConfig, SyncMode};
use crate::masking::support_size;

pub const FLOAT_BYTES: u64 = 8;
pub const SEED_BYTES: u64 = 8;
pub const INDEX_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommCost {
    pub uplink: u64,
    pub downlink: u64,
}

impl CommCost {
    pub fn total(&self) -> u64 {
        self.uplink + self.downlink
    }
}

impl std::ops::AddAssign for CommCost {
    fn add_assign(&mut self, rhs: Self) {
        self.uplink += rhs.uplink;
        self.downlink += rhs.downlink;
    }
}

/// Cost of one client taking `steps` local steps with `support_len` trainable
/// coordinates.
///
/// * multi-step: up `8 T`; down `8 s + 8 T` (sparse parameters plus seeds)
/// * high-frequency: up `8` (one scalar); down `16` (averaged scalar plus the next seed)
pub fn round_cost(mode: SyncMode, steps: usize, support_len: usize) -> CommCost {
    match mode {
        SyncMode::MultiStep => CommCost {
            uplink: FLOAT_BYTES * steps as u64,
            downlink: FLOAT_BYTES * support_len as u64 + SEED_BYTES * steps as u64,
        },
        SyncMode::HighFrequency => CommCost {
            uplink: FLOAT_BYTES,
            downlink: FLOAT_BYTES + SEED_BYTES,
        },
    }
}

/// Per-client, per-round cost for a `d`-parameter model at `density`.
pub fn communication_cost(cfg: &RoundConfig, d: usize, density: f64) -> CommCost {
    round_cost(cfg.mode, cfg.local_steps, support_size(density, d))
}

/// Reference cost of exchanging the full dense model both ways.
pub fn full_parameter_cost(d: usize) -> CommCost {
    CommCost {
        uplink: FLOAT_BYTES * d as u64,
        downlink: FLOAT_BYTES * d as u64,
    }
}

use std::io::Write;

use super::protocol::ProjectedGradientLog;
use crate::error::Result;
use crate::gradip::GradIPTrajectory;

/// Column names of the per-round metrics CSV.
pub const METRICS_HEADER: &str = "round,global_loss,gap,up_bytes,down_bytes,flagged";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    /// Distance to the attainable optimum, when known.
    pub gap: Option<f64>,
    /// Cumulative uplink bytes over all clients.
    pub up_bytes: u64,
    /// Cumulative downlink bytes over all clients.
    pub down_bytes: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    /// One record per completed round, starting with round 0 (the initial model).
    pub records: Vec<RoundRecord>,
    /// Per-round uploads, in round then client order; empty unless retained.
    pub logs: Vec<ProjectedGradientLog>,
    /// Clients restricted to one local step.
    pub flagged: Vec<usize>,
    /// GradIP calibration traces, when a calibration pass ran.
    pub trajectories: Vec<GradIPTrajectory>,
}

impl MetricsSeries {
    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_record().map(|r| r.global_loss)
    }

    /// Mean gap over the last `fraction` of rounds (at least one record,
    /// excluding round 0 when other rounds exist).
    pub fn tail_mean_gap(&self, fraction: f64) -> Option<f64> {
        let rounds = &self.records[1.min(self.records.len().saturating_sub(1))..];
        let n = ((rounds.len() as f64 * fraction).ceil() as usize).clamp(1, rounds.len().max(1));
        let tail = &rounds[rounds.len().saturating_sub(n)..];
        let gaps: Option<Vec<f64>> = tail.iter().map(|r| r.gap).collect();
        let gaps = gaps?;
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }

    /// CSV with [`METRICS_HEADER`]; floats use the shortest round-trip form
    /// so identical runs produce identical bytes.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        let flagged = self
            .flagged
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(";");
        for r in &self.records {
            let gap = r.gap.map(|g| g.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, r.global_loss, gap, r.up_bytes, r.down_bytes, flagged
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

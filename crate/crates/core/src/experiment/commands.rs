use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::build::Setup;
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fed::{full_parameter_cost, run_federation, MetricsSeries, RunOptions};
use crate::gradip::{apply_vp, calibrate, Calibration, Classification};
use crate::masking::{MaskKind, SparseMask};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CLASSIFICATION_FILE: &str = "classification.json";
pub const COMPARE_HEADER: &str = "mask_kind,final_loss,final_gap,global_gap,up_bytes,down_bytes";

/// Process exit code for a failed command: 2 for bad configuration, 3 for a
/// numerical failure, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Json(_) => 2,
        Error::Numerical { .. } => 3,
        Error::Protocol(_) | Error::Io(_) => 1,
    }
}

/// Trajectory file name for one client.
pub fn trajectory_file(client_id: usize) -> String {
    format!("gradip_client_{client_id}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mask_kind: MaskKind,
    pub dim: usize,
    pub support_len: usize,
    pub rounds: usize,
    pub final_loss: f64,
    /// Gap to the best value reachable on the mask.
    pub final_gap: Option<f64>,
    /// Gap to the unrestricted optimum.
    pub global_gap: Option<f64>,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub local_steps: Vec<usize>,
    pub flagged: Vec<usize>,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: MetricsSeries,
    pub calibration: Option<Calibration>,
    pub summary: Summary,
}

/// Builds and trains one federation with the given mask, calibrating first
/// when the config has a `vp` section. On a numerical failure the partial
/// metrics are returned alongside the error.
pub fn execute(
    cfg: &ExperimentConfig,
    setup: &Setup,
    mask: SparseMask,
    kind: MaskKind,
) -> std::result::Result<RunReport, (Error, Option<MetricsSeries>)> {
    let mut fed = setup
        .federation(cfg.round.to_round_config(), mask)
        .map_err(|e| (e, None))?;
    let calibration = match &cfg.vp {
        Some(vp) => {
            let pretrain = setup.pretrain_gradient().map_err(|e| (e, None))?;
            Some(apply_vp(&mut fed, &pretrain, vp).map_err(|e| (e, None))?)
        }
        None => None,
    };
    let mut metrics = run_federation(&mut fed, &RunOptions::default()).map_err(|f| (f.error, Some(f.partial)))?;
    if let Some(cal) = &calibration {
        metrics.trajectories = cal.trajectories.clone();
    }
    let last = metrics.final_record().expect("round 0 is always recorded").clone();
    let global_gap = setup.global_optimum().map(|f| last.global_loss - f);
    let summary = Summary {
        mask_kind: kind,
        dim: fed.server.mask.dim(),
        support_len: fed.server.mask.support_len(),
        rounds: cfg.round.rounds,
        final_loss: last.global_loss,
        final_gap: last.gap,
        global_gap,
        up_bytes: last.up_bytes,
        down_bytes: last.down_bytes,
        local_steps: fed.local_steps().to_vec(),
        flagged: fed.flagged().to_vec(),
    };
    Ok(RunReport {
        metrics,
        calibration,
        summary,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_trajectories(dir: &Path, cal: &Calibration) -> Result<()> {
    for t in &cal.trajectories {
        let mut out = create(dir, &trajectory_file(t.client_id))?;
        t.write_csv(&mut out)?;
        out.flush()?;
    }
    #[derive(Serialize)]
    struct Entry<'a> {
        client_id: usize,
        #[serde(flatten)]
        class: &'a Classification,
    }
    let entries: Vec<Entry> = cal
        .classes
        .iter()
        .enumerate()
        .map(|(client_id, class)| Entry { client_id, class })
        .collect();
    let mut out = create(dir, CLASSIFICATION_FILE)?;
    serde_json::to_writer_pretty(&mut out, &entries)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_metrics(dir: &Path, metrics: &MetricsSeries) -> Result<()> {
    let mut out = create(dir, METRICS_FILE)?;
    metrics.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// `run`: trains, then writes the metrics CSV, a JSON summary, and (with a
/// `vp` section) the calibration trajectories.
pub fn cmd_run(config_path: &Path) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(config_path)?;
    let setup = Setup::build(&cfg)?;
    let mask = setup.mask(cfg.mask.kind, cfg.mask.density)?;
    let dir = prepare_output(&cfg)?;
    match execute(&cfg, &setup, mask, cfg.mask.kind) {
        Ok(report) => {
            write_metrics(&dir, &report.metrics)?;
            let mut out = create(&dir, SUMMARY_FILE)?;
            serde_json::to_writer_pretty(&mut out, &report.summary)?;
            writeln!(out)?;
            out.flush()?;
            if let Some(cal) = &report.calibration {
                write_trajectories(&dir, cal)?;
            }
            Ok(report)
        }
        Err((err, partial)) => {
            if let Some(partial) = partial {
                write_metrics(&dir, &partial)?;
            }
            Err(err)
        }
    }
}

/// `mask`: builds the configured mask and writes it to `out_path`.
pub fn cmd_mask(config_path: &Path, out_path: &Path) -> Result<SparseMask> {
    let cfg = ExperimentConfig::load(config_path)?;
    let setup = Setup::build(&cfg)?;
    let mask = setup.mask(cfg.mask.kind, cfg.mask.density)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(out_path)?);
    mask.write_to(&mut out)?;
    out.flush()?;
    Ok(mask)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub mask_kind: MaskKind,
    pub final_loss: f64,
    pub final_gap: Option<f64>,
    pub global_gap: Option<f64>,
    pub up_bytes: u64,
    pub down_bytes: u64,
}

/// Runs every mask kind in `compare` under the same seed and round budget.
/// The `full` row is priced as full-parameter exchange.
pub fn compare_rows(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    if cfg.compare.is_empty() {
        return Err(Error::config("compare must list at least one mask kind"));
    }
    let setup = Setup::build(cfg)?;
    let mut rows = Vec::with_capacity(cfg.compare.len());
    for &kind in &cfg.compare {
        let mask = setup.mask(kind, cfg.mask.density)?;
        let report = execute(cfg, &setup, mask, kind).map_err(|(e, _)| e)?;
        let s = report.summary;
        let (up_bytes, down_bytes) = if kind == MaskKind::Full {
            let per = full_parameter_cost(s.dim);
            let n = (cfg.round.rounds * cfg.round.clients) as u64;
            (per.uplink * n, per.downlink * n)
        } else {
            (s.up_bytes, s.down_bytes)
        };
        rows.push(CompareRow {
            mask_kind: kind,
            final_loss: s.final_loss,
            final_gap: s.final_gap,
            global_gap: s.global_gap,
            up_bytes,
            down_bytes,
        });
    }
    Ok(rows)
}

pub fn write_compare_csv(rows: &[CompareRow], mut out: impl Write) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{COMPARE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mask_kind.name(),
            r.final_loss,
            opt(r.final_gap),
            opt(r.global_gap),
            r.up_bytes,
            r.down_bytes
        )?;
    }
    Ok(())
}

/// `compare`: writes the comparison table.
pub fn cmd_compare(config_path: &Path) -> Result<Vec<CompareRow>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let rows = compare_rows(&cfg)?;
    let dir = prepare_output(&cfg)?;
    let mut out = create(&dir, COMPARE_FILE)?;
    write_compare_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(rows)
}

/// `gradip`: calibration only; writes one trajectory CSV per client and the
/// classification diagnostics.
pub fn cmd_gradip(config_path: &Path) -> Result<Calibration> {
    let cfg = ExperimentConfig::load(config_path)?;
    let vp = cfg
        .vp
        .ok_or_else(|| Error::config("the gradip command needs a vp section"))?;
    let setup = Setup::build(&cfg)?;
    let mask = setup.mask(cfg.mask.kind, cfg.mask.density)?;
    let fed = setup.federation(cfg.round.to_round_config(), mask)?;
    let cal = calibrate(&fed, &setup.pretrain_gradient()?, &vp)?;
    let dir = prepare_output(&cfg)?;
    write_trajectories(&dir, &cal)?;
    Ok(cal)
}


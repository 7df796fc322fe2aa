//! Browser demo bindings. Every export takes plain numbers and returns a JSON
//! string, so the page needs no generated type glue beyond `wasm-bindgen`.

use meerkat::experiment::{ExperimentConfig, Setup};
use meerkat::fed::{communication_cost, full_parameter_cost, run_federation, RoundConfig, RunOptions, SyncMode};
use meerkat::gradip::{calibrate, moving_average};
use meerkat::zo::ZoConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct ClientTrace {
    client_id: usize,
    single_label: bool,
    flagged: bool,
    gradip: Vec<f64>,
    grad_norm_ma: Vec<f64>,
}

/// Calibration traces for five IID and five single-label clients.
#[wasm_bindgen]
pub fn gradip_traces(seed: u32, offset: f64) -> String {
    let text = format!(
        r#"{{"version": 1, "master_seed": {seed},
            "model": {{"kind": "logistic", "features": 10, "classes": 5}},
            "data": {{"per_class": 200, "spread": 0.5, "offset": {offset}, "scale": 3,
                      "partition": {{"kind": "mixed", "iid_clients": 5}}}},
            "mask": {{"density": 1.0}},
            "round": {{"local_steps": 30, "rounds": 1, "clients": 10, "eta": 0.03}},
            "vp": {{}}}}"#
    );
    let run = || -> meerkat::Result<Vec<ClientTrace>> {
        let cfg = ExperimentConfig::from_json(&text)?;
        let setup = Setup::build(&cfg)?;
        let mask = setup.mask(cfg.mask.kind, cfg.mask.density)?;
        let fed = setup.federation(cfg.round.to_round_config(), mask)?;
        let cal = calibrate(&fed, &setup.pretrain_gradient()?, cfg.vp.as_ref().expect("vp section"))?;
        Ok(cal
            .trajectories
            .iter()
            .zip(&cal.classes)
            .map(|(t, c)| ClientTrace {
                client_id: t.client_id,
                single_label: t.client_id >= 5,
                flagged: c.flagged,
                gradip: t.gradip.clone(),
                grad_norm_ma: moving_average(&t.grad_norm, 10),
            })
            .collect())
    };
    match run() {
        Ok(traces) => to_json(&traces),
        Err(e) => error_json(&e.to_string()),
    }
}

#[derive(Serialize)]
struct FloorCurve {
    local_steps: usize,
    /// Optimality gap after every round, indexed by local steps taken.
    steps: Vec<usize>,
    gap: Vec<f64>,
}

/// Optimality gap against total local steps on two shifted quadratics, one
/// curve per communication interval.
#[wasm_bindgen]
pub fn error_floor(seed: u32, heterogeneity: f64, total_steps: u32) -> String {
    let total = total_steps.clamp(100, 20_000) as usize;
    let mut curves = Vec::new();
    for t in [100usize, 10, 1] {
        let text = format!(
            r#"{{"version": 1, "master_seed": {seed},
                "model": {{"kind": "pl-quadratic", "dim": 10, "condition": 10, "heterogeneity": {heterogeneity}}},
                "mask": {{"density": 0.5}},
                "round": {{"local_steps": {t}, "rounds": {}, "clients": 2, "eta": 0.02}}}}"#,
            total / t
        );
        let run = || -> meerkat::Result<FloorCurve> {
            let cfg = ExperimentConfig::from_json(&text)?;
            let setup = Setup::build(&cfg)?;
            let mask = setup.mask(cfg.mask.kind, cfg.mask.density)?;
            let mut fed = setup.federation(cfg.round.to_round_config(), mask)?;
            let m = run_federation(&mut fed, &RunOptions::default()).map_err(|f| f.error)?;
            Ok(FloorCurve {
                local_steps: t,
                steps: m.records.iter().map(|r| r.round * t).collect(),
                gap: m.records.iter().map(|r| r.gap.unwrap_or(f64::NAN)).collect(),
            })
        };
        match run() {
            Ok(c) => curves.push(c),
            Err(e) => return error_json(&e.to_string()),
        }
    }
    to_json(&curves)
}

#[derive(Serialize)]
struct CostRow {
    mode: &'static str,
    uplink: u64,
    downlink: u64,
    full_uplink: u64,
    full_downlink: u64,
    savings: f64,
}

/// Bytes per client and round against full-parameter exchange.
#[wasm_bindgen]
pub fn comm_cost(dim: f64, density: f64, local_steps: u32) -> String {
    if !(1.0..=1e12).contains(&dim) || !(density > 0.0 && density <= 1.0) || local_steps == 0 {
        return error_json("need dim >= 1, 0 < density <= 1, local_steps >= 1");
    }
    let d = dim as usize;
    let full = full_parameter_cost(d);
    let rows: Vec<CostRow> = [("multi-step", SyncMode::MultiStep, local_steps as usize), ("high-frequency", SyncMode::HighFrequency, 1)]
        .into_iter()
        .map(|(mode, sync, steps)| {
            let cfg = RoundConfig {
                local_steps: steps,
                rounds: 1,
                clients: 1,
                mode: sync,
                zo: ZoConfig::default(),
            };
            let c = communication_cost(&cfg, d, density);
            // Compare equal amounts of local work: T high-frequency rounds per multi-step round.
            let scale = (local_steps as usize / steps) as u64;
            CostRow {
                mode,
                uplink: c.uplink * scale,
                downlink: c.downlink * scale,
                full_uplink: full.uplink,
                full_downlink: full.downlink,
                savings: full.total() as f64 / (c.total() * scale) as f64,
            }
        })
        .collect();
    to_json(&rows)
}

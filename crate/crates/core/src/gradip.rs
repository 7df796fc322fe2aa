//! GradIP tracing from virtual paths and virtual-path client selection.
//!
//! The server rebuilds each client's local ZO gradients `g_t · z̄_t` from the
//! uploaded scalars, scores them against a frozen calibration gradient, and
//! restricts clients whose scores collapse to one local step per round.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{client_round, Federation, ProjectedGradientLog, StepContext};
use crate::masking::{SparseMask, SparseVector};
use crate::model::{Batch, ModelSpec, ParamVector};
use crate::prng::{masked_gaussian, SeedSchedule};

/// Column names of the trajectory CSV.
pub const TRAJECTORY_HEADER: &str = "client_id,step,gradip,grad_norm,cosine";

const ZERO_GUARD: f64 = 1e-12;

/// Mean exact gradient over `calib` at `w0`.
pub fn pretrain_gradient(spec: &ModelSpec, w0: &[f64], calib: &[Batch]) -> Result<ParamVector> {
    if calib.is_empty() {
        return Err(Error::input("calibration set is empty"));
    }
    let mut sum = vec![0.0; spec.dim()];
    for batch in calib {
        let g = spec.grad(w0, batch)?;
        sum.iter_mut().zip(g.iter()).for_each(|(s, gi)| *s += gi);
    }
    let n = calib.len() as f64;
    Ok(ParamVector::from(sum.into_iter().map(|s| s / n).collect::<Vec<_>>()))
}

/// `⟨∇f_p, ∇̂f⟩`; only the sparse support contributes.
pub fn gradip_score(zo_grad: &SparseVector, pretrain: &[f64]) -> f64 {
    zo_grad.dot_dense(pretrain)
}

/// Which norm of the calibration gradient normalizes the cosine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineNorm {
    #[default]
    Full,
    Support,
}

/// Cosine between `zo_grad` and `pretrain`; 0 when either side vanishes.
pub fn cosine(zo_grad: &SparseVector, pretrain: &[f64], norm: CosineNorm) -> f64 {
    let p_norm = match norm {
        CosineNorm::Full => pretrain.iter().map(|v| v * v).sum::<f64>().sqrt(),
        CosineNorm::Support => zo_grad
            .indices()
            .iter()
            .map(|&i| pretrain[i] * pretrain[i])
            .sum::<f64>()
            .sqrt(),
    };
    let denom = zo_grad.norm() * p_norm;
    if denom > 0.0 {
        gradip_score(zo_grad, pretrain) / denom
    } else {
        0.0
    }
}

/// Per-step diagnostics for one client's calibration path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradIPTrajectory {
    pub client_id: usize,
    pub gradip: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub cosine: Vec<f64>,
}

impl GradIPTrajectory {
    pub fn len(&self) -> usize {
        self.gradip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gradip.is_empty()
    }

    /// Rows without a header; steps are 1-based.
    pub fn write_rows(&self, mut out: impl Write) -> Result<()> {
        for t in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.client_id,
                t + 1,
                self.gradip[t],
                self.grad_norm[t],
                self.cosine[t]
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        self.write_rows(out)
    }
}

/// Rebuilds the local gradients of `log` and scores every step.
pub fn trace_client(
    log: &ProjectedGradientLog,
    mask: &SparseMask,
    schedule: &SeedSchedule,
    pretrain: &[f64],
    t_cali: usize,
    norm: CosineNorm,
) -> Result<GradIPTrajectory> {
    if log.scalars.len() != t_cali {
        return Err(Error::input(format!(
            "client {} uploaded {} scalars, expected {t_cali}",
            log.client_id,
            log.scalars.len()
        )));
    }
    if pretrain.len() != mask.dim() {
        return Err(Error::input("calibration gradient dimension differs from the mask"));
    }
    let mut traj = GradIPTrajectory {
        client_id: log.client_id,
        gradip: Vec::with_capacity(t_cali),
        grad_norm: Vec::with_capacity(t_cali),
        cosine: Vec::with_capacity(t_cali),
    };
    for (t, &g) in log.scalars.iter().enumerate() {
        let z = masked_gaussian(schedule.derive_seed(log.round, t as u32 + 1), mask);
        let grad = z.scaled(g);
        traj.gradip.push(gradip_score(&grad, pretrain));
        traj.grad_norm.push(grad.norm());
        traj.cosine.push(cosine(&grad, pretrain, norm));
    }
    Ok(traj)
}

/// Thresholds for virtual-path client selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VpConfig {
    pub calibration_steps: usize,
    pub initial_steps: usize,
    pub later_steps: usize,
    pub sigma: f64,
    pub rho_later: f64,
    pub rho_quie: f64,
    pub cosine_norm: CosineNorm,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self {
            calibration_steps: 100,
            initial_steps: 20,
            later_steps: 20,
            sigma: 1.0,
            rho_later: 5.0,
            rho_quie: 0.7,
            cosine_norm: CosineNorm::Full,
        }
    }
}

impl VpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_steps == 0 || self.later_steps == 0 {
            return Err(Error::config("vp.initial_steps and vp.later_steps must be positive"));
        }
        if self.initial_steps + self.later_steps > self.calibration_steps {
            return Err(Error::config(
                "vp.initial_steps + vp.later_steps must not exceed vp.calibration_steps",
            ));
        }
        if self.calibration_steps > u32::MAX as usize {
            return Err(Error::config("vp.calibration_steps is too large"));
        }
        for (name, v) in [("vp.sigma", self.sigma), ("vp.rho_later", self.rho_later), ("vp.rho_quie", self.rho_quie)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`classify`] with the statistics behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub flagged: bool,
    pub init_avg: f64,
    pub later_avg: f64,
    pub rho_later: f64,
    pub rho_quie: f64,
}

/// Flags a trajectory whose early scores dwarf its late ones, or whose late
/// scores mostly sit below `sigma`. The late window is the final
/// `later_steps` entries.
pub fn classify(traj: &GradIPTrajectory, cfg: &VpConfig) -> Classification {
    let values = &traj.gradip;
    let n_init = cfg.initial_steps.min(values.len());
    let n_later = cfg.later_steps.min(values.len());
    let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    let init_avg = mean(&values[..n_init]);
    let later = &values[values.len() - n_later..];
    let later_avg = mean(later);
    let rho_quie = if later.is_empty() {
        0.0
    } else {
        later.iter().filter(|&&v| v < cfg.sigma).count() as f64 / later.len() as f64
    };
    let rho_later = if later_avg.abs() < ZERO_GUARD {
        if init_avg.abs() >= ZERO_GUARD {
            f64::INFINITY
        } else {
            1.0
        }
    } else {
        init_avg / later_avg
    };
    Classification {
        flagged: rho_later > cfg.rho_later || rho_quie > cfg.rho_quie,
        init_avg,
        later_avg,
        rho_later,
        rho_quie,
    }
}

/// Flagged clients run one step per round; the rest keep `local_steps`.
pub fn vp_policy(flags: &[bool], local_steps: usize) -> Vec<usize> {
    flags.iter().map(|&f| if f { 1 } else { local_steps }).collect()
}

/// Trajectories and classifications from one calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub trajectories: Vec<GradIPTrajectory>,
    pub classes: Vec<Classification>,
}

impl Calibration {
    pub fn flags(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.flagged).collect()
    }

    pub fn flagged_ids(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.flagged.then_some(k))
            .collect()
    }
}

/// Runs `calibration_steps` local steps on copies of every client, starting
/// from the current global model and drawing directions from the dedicated
/// calibration schedule, then traces and classifies each virtual path. The
/// federation itself is left untouched.
pub fn calibrate(fed: &Federation, pretrain: &[f64], cfg: &VpConfig) -> Result<Calibration> {
    cfg.validate()?;
    let schedule = fed.server.schedule.calibration();
    let ctx = StepContext {
        mask: &fed.server.mask,
        schedule: &schedule,
        zo: &fed.config.zo,
    };
    let mut trajectories = Vec::with_capacity(fed.clients.len());
    for client in &fed.clients {
        let mut probe = client.clone();
        let log = client_round(&mut probe, &fed.server.global_params, 1, cfg.calibration_steps, ctx)?;
        trajectories.push(trace_client(
            &log,
            &fed.server.mask,
            &schedule,
            pretrain,
            cfg.calibration_steps,
            cfg.cosine_norm,
        )?);
    }
    let classes = trajectories.iter().map(|t| classify(t, cfg)).collect();
    Ok(Calibration { trajectories, classes })
}

/// Calibrates and installs the resulting early-stopping policy.
pub fn apply_vp(fed: &mut Federation, pretrain: &[f64], cfg: &VpConfig) -> Result<Calibration> {
    let cal = calibrate(fed, pretrain, cfg)?;
    let steps = vp_policy(&cal.flags(), fed.config.local_steps);
    fed.set_local_steps(steps, cal.flagged_ids())?;
    Ok(cal)
}

/// Trailing moving average; entry `t` averages `series[t+1-window..=t]`
/// (fewer at the start).
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (t, &v) in series.iter().enumerate() {
        acc += v;
        if t >= window {
            acc -= series[t - window];
        }
        out.push(acc / (t + 1).min(window) as f64);
    }
    out
}

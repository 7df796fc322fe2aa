use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionKind, DEFAULT_BATCH_SIZE, DEFAULT_HOLDOUT};
use crate::error::{Error, Result};
use crate::fed::{RoundConfig, SyncMode};
use crate::gradip::VpConfig;
use crate::masking::MaskKind;
use crate::zo::ZoConfig;

/// Schema version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

/// Overrides `output` when set.
pub const OUTPUT_DIR_ENV: &str = "MEERKAT_OUTPUT_DIR";

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub master_seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub mask: MaskConfig,
    pub round: RoundSection,
    #[serde(default)]
    pub vp: Option<VpConfig>,
    /// Mask kinds swept by `compare`.
    #[serde(default)]
    pub compare: Vec<MaskKind>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Per-client quadratics `½ wᵀA_k w − b_kᵀw` with eigenvalues spread
    /// evenly over `[1/condition, 1]`. With `heterogeneity > 0` every client
    /// gets its own eigenbasis and a minimizer shifted by
    /// `heterogeneity * N(0, I)`.
    PlQuadratic {
        dim: usize,
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default)]
        heterogeneity: f64,
    },
    Logistic {
        features: usize,
        classes: usize,
    },
    Mlp {
        features: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

fn default_condition() -> f64 {
    10.0
}

impl ModelConfig {
    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelConfig::PlQuadratic { .. })
    }
}

/// Synthetic blobs and their split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Added to every feature after generation.
    #[serde(default)]
    pub offset: f64,
    /// Multiplies every feature after the offset.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Fraction held out as the calibration set before partitioning.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_spread() -> f64 {
    0.5
}
fn default_scale() -> f64 {
    1.0
}
fn default_partition() -> PartitionKind {
    PartitionKind::Dirichlet { alpha: 0.5 }
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_holdout() -> f64 {
    DEFAULT_HOLDOUT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_mask_kind")]
    pub kind: MaskKind,
    pub density: f64,
}

fn default_mask_kind() -> MaskKind {
    MaskKind::Meerkat
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::Meerkat,
            density: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSection {
    pub local_steps: usize,
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_mode")]
    pub mode: SyncMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_clients() -> usize {
    10
}
fn default_mode() -> SyncMode {
    SyncMode::MultiStep
}
fn default_epsilon() -> f64 {
    ZoConfig::default().epsilon
}
fn default_eta() -> f64 {
    ZoConfig::default().eta
}

impl RoundSection {
    pub fn to_round_config(&self) -> RoundConfig {
        RoundConfig {
            local_steps: self.local_steps,
            rounds: self.rounds,
            clients: self.clients,
            mode: self.mode,
            zo: ZoConfig {
                epsilon: self.epsilon,
                eta: self.eta,
            },
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks every field before anything is computed.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "version must be {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        match &self.model {
            ModelConfig::PlQuadratic { dim, condition, heterogeneity } => {
                nonzero("model.dim", *dim)?;
                if !(condition.is_finite() && *condition >= 1.0) {
                    return Err(Error::config(format!("model.condition must be at least 1, got {condition}")));
                }
                if !(heterogeneity.is_finite() && *heterogeneity >= 0.0) {
                    return Err(Error::config(format!(
                        "model.heterogeneity must be non-negative, got {heterogeneity}"
                    )));
                }
                if self.data.is_some() {
                    return Err(Error::config("data is not used by a pl-quadratic model; remove it"));
                }
            }
            ModelConfig::Logistic { features, classes } | ModelConfig::Mlp { features, classes, .. } => {
                nonzero("model.features", *features)?;
                if *classes < 2 {
                    return Err(Error::config(format!("model.classes must be at least 2, got {classes}")));
                }
                if let ModelConfig::Mlp { hidden, .. } = &self.model {
                    if hidden.is_empty() || hidden.contains(&0) {
                        return Err(Error::config("model.hidden must list positive layer widths"));
                    }
                }
                let data = self
                    .data
                    .as_ref()
                    .ok_or_else(|| Error::config("data is required for classifier models"))?;
                data.validate(self.round.clients)?;
            }
        }
        let d = &self.mask;
        if !(d.density > 0.0 && d.density <= 1.0) {
            return Err(Error::config(format!("mask.density must be in (0, 1], got {}", d.density)));
        }
        let r = &self.round;
        nonzero("round.local_steps", r.local_steps)?;
        nonzero("round.clients", r.clients)?;
        positive("round.epsilon", r.epsilon)?;
        positive("round.eta", r.eta)?;
        if r.local_steps > u32::MAX as usize || r.rounds >= u32::MAX as usize {
            return Err(Error::config("round.local_steps and round.rounds must fit in 32 bits"));
        }
        if r.mode == SyncMode::HighFrequency && r.local_steps != 1 {
            return Err(Error::config("round.local_steps must be 1 in high-frequency mode"));
        }
        if let Some(vp) = &self.vp {
            vp.validate()?;
            if r.mode == SyncMode::HighFrequency {
                return Err(Error::config("vp needs round.mode = multi-step"));
            }
        }
        Ok(())
    }

    /// `output`, unless the environment overrides it.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.clone(),
        }
    }
}

impl DataConfig {
    fn validate(&self, clients: usize) -> Result<()> {
        nonzero("data.per_class", self.per_class)?;
        nonzero("data.batch_size", self.batch_size)?;
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::config(format!("data.spread must be non-negative, got {}", self.spread)));
        }
        positive("data.scale", self.scale)?;
        if !self.offset.is_finite() {
            return Err(Error::config("data.offset must be finite"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::config(format!("data.holdout must be in (0, 1), got {}", self.holdout)));
        }
        match self.partition {
            PartitionKind::Dirichlet { alpha } => positive("data.partition.alpha", alpha)?,
            PartitionKind::Mixed { iid_clients } if iid_clients > clients => {
                return Err(Error::config(format!(
                    "data.partition.iid_clients ({iid_clients}) exceeds round.clients ({clients})"
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

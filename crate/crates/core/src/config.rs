//! Run configuration: one TOML file drives every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cvae::{CvaeConfig, CvaeTrainConfig, LabelMode};
use crate::datasets::{SyntheticConfig, VISIBILITY_THRESHOLD};
use crate::eval::ThresholdGrid;
use crate::nn::{AdamWConfig, ScheduleConfig};
use crate::regression::HeadTrainConfig;
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Box jitter magnitude (fraction of box size) for training and test crops.
    pub jitter: f64,
    /// Records less visible than this are dropped from every split.
    pub visibility_threshold: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            jitter: 0.05,
            visibility_threshold: VISIBILITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub use_labels: bool,
    #[serde(deserialize_with = "heads_schedule")]
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            use_labels: true,
            schedule: ScheduleConfig::heads(),
            optimizer: AdamWConfig::default(),
        }
    }
}

/// A schedule table where omitted keys keep the head defaults rather than
/// the autoencoder ones.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSchedule {
    lr: Option<f64>,
    min_lr: Option<f64>,
    factor: Option<f64>,
    plateau_patience: Option<usize>,
    stop_patience: Option<usize>,
    max_epochs: Option<usize>,
}

fn heads_schedule<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ScheduleConfig, D::Error> {
    let p = PartialSchedule::deserialize(d)?;
    let b = ScheduleConfig::heads();
    Ok(ScheduleConfig {
        lr: p.lr.unwrap_or(b.lr),
        min_lr: p.min_lr.unwrap_or(b.min_lr),
        factor: p.factor.unwrap_or(b.factor),
        plateau_patience: p.plateau_patience.unwrap_or(b.plateau_patience),
        stop_patience: p.stop_patience.unwrap_or(b.stop_patience),
        max_epochs: p.max_epochs.unwrap_or(b.max_epochs),
    })
}

/// Label-embedding variants compared by the label ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelVariant {
    /// Labels at every encoder block, decoder layer and head layer.
    Full,
    /// Labels only at the first encoder and decoder layers; heads as in `Full`.
    OriginalCvae,
    /// Full label embedding in the autoencoder, label-free heads.
    NoLabelMlp,
}

impl LabelVariant {
    pub fn name(self) -> &'static str {
        match self {
            LabelVariant::Full => "full",
            LabelVariant::OriginalCvae => "original-cvae",
            LabelVariant::NoLabelMlp => "no-label-mlp",
        }
    }

    pub fn label_mode(self) -> LabelMode {
        match self {
            LabelVariant::OriginalCvae => LabelMode::FirstLayer,
            _ => LabelMode::Full,
        }
    }

    pub fn head_labels(self) -> bool {
        self != LabelVariant::NoLabelMlp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub alpha: Vec<f64>,
    pub latent: Vec<usize>,
    pub label: Vec<LabelVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 0.1, 0.5, 1.0],
            latent: vec![32, 64, 128, 256, 512, 1024],
            label: vec![
                LabelVariant::Full,
                LabelVariant::OriginalCvae,
                LabelVariant::NoLabelMlp,
            ],
        }
    }
}

/// Everything a run needs. The top-level `seed` seeds autoencoder and head
/// training; the dataset generator keeps its own `dataset.seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub dataset: SyntheticConfig,
    pub crops: CropConfig,
    pub cvae: CvaeConfig,
    pub cvae_training: CvaeTrainConfig,
    pub heads: HeadsConfig,
    pub ablation: AblationConfig,
    pub eval: ThresholdGrid,
}

const CVAE_SEED_TAG: u64 = 11;
const HEADS_SEED_TAG: u64 = 12;

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.message().to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut cvae = self.cvae.clone();
        if cvae.num_classes == 0 {
            cvae.num_classes = self.dataset.objects.len().max(1);
        }
        cvae.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.cvae_training.batch_size == 0 {
            return bad("cvae_training.batch_size must be positive".into());
        }
        for (name, s) in [
            ("cvae_training.schedule", &self.cvae_training.schedule),
            ("heads.schedule", &self.heads.schedule),
        ] {
            if !(s.lr > 0.0 && s.min_lr > 0.0 && s.min_lr <= s.lr) {
                return bad(format!("{name}: need 0 < min_lr <= lr"));
            }
            if !(s.factor > 0.0 && s.factor < 1.0) {
                return bad(format!("{name}: factor must lie in (0, 1)"));
            }
            if s.max_epochs == 0 {
                return bad(format!("{name}: max_epochs must be positive"));
            }
        }
        if !(0.0..=0.5).contains(&self.crops.jitter) {
            return bad("crops.jitter must lie in [0, 0.5]".into());
        }
        if !(0.0..=1.0).contains(&self.crops.visibility_threshold) {
            return bad("crops.visibility_threshold must lie in [0, 1]".into());
        }
        if self.ablation.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("ablation.alpha values must be finite and >= 0".into());
        }
        if self.ablation.latent.contains(&0) {
            return bad("ablation.latent values must be positive".into());
        }
        for (name, g) in [
            ("mssd", &self.eval.mssd),
            ("mspd", &self.eval.mspd),
            ("mspd_fine", &self.eval.mspd_fine),
        ] {
            if g.is_empty() || g.iter().any(|t| !(*t > 0.0)) {
                return bad(format!("eval.{name} must be a non-empty list of positive thresholds"));
            }
        }
        Ok(())
    }

    /// Autoencoder config with the class count and derived seed filled in.
    pub fn cvae_config(&self, num_classes: usize) -> CvaeConfig {
        CvaeConfig {
            num_classes,
            seed: derive_seed(self.seed, &[CVAE_SEED_TAG]),
            ..self.cvae.clone()
        }
    }

    pub fn head_train_config(&self, use_labels: bool) -> HeadTrainConfig {
        HeadTrainConfig {
            schedule: self.heads.schedule,
            optimizer: self.heads.optimizer,
            use_labels,
            seed: derive_seed(self.seed, &[HEADS_SEED_TAG]),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serialisable")))
    }
}

//! Declarative run configuration.
//!
//! A pipeline run is described by one TOML file. Every table is optional and
//! falls back to its defaults. Seeds inside sections (`cohort.phantom.seed`,
//! `train.seed`, `eval.seed`) are ignored by the pipeline: all randomness is
//! drawn from the root `seed` through [`laspet_core::seed::derive`] with the
//! stage names listed in [`stages`].

use std::path::{Path, PathBuf};

use laspet_core::evaluation::{EvalConfig, GroupKey};
use laspet_core::longitudinal::RegistrationConfig;
use laspet_core::phantom::PhantomConfig;
use laspet_neural::infer::InferConfig;
use laspet_neural::train::TrainConfig;
use laspet_neural::LasNetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Stage, StageExt};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Stage names fed to the seed derivation.
pub mod stages {
    /// Index = patient position in the cohort.
    pub const PHANTOM: &str = "phantom";
    /// Index = patient position in the cohort.
    pub const MISREGISTRATION: &str = "misregistration";
    /// Index = training study position.
    pub const TRAIN_PHANTOM: &str = "train-phantom";
    /// Index 0: parameter initialization, patch sampling and augmentation.
    pub const TRAIN: &str = "train";
    /// Index 0: every bootstrap interval of the report.
    pub const BOOTSTRAP: &str = "bootstrap";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    /// Ground truth used as the prediction.
    Oracle,
    /// Threshold-union rule inside boxes around each true lesion.
    ThresholdUnion,
    /// Trained two-branch network.
    Model,
}

impl SegmenterKind {
    pub fn parse(s: &str) -> Option<SegmenterKind> {
        match s {
            "oracle" => Some(SegmenterKind::Oracle),
            "threshold-union" => Some(SegmenterKind::ThresholdUnion),
            "model" => Some(SegmenterKind::Model),
            _ => None,
        }
    }
}

/// PET2 → PET1 transform used for MPDR and for aligning network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Time points assumed co-registered.
    Identity,
    /// Transform recorded by the phantom generator.
    Known,
    /// Rigid registration of PET1 onto PET2.
    Rigid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub size: usize,
    /// Adds `k % 3` baseline lesions to patient `k` so count metrics vary.
    pub vary_lesion_count: bool,
    /// Per-axis bound of the uniform random PET1 shift; 0 disables it.
    pub max_shift_mm: f64,
    /// Per-axis bound of the uniform random PET1 rotation; 0 disables it.
    pub max_rotation_deg: f64,
    /// Studies generated for training the model segmenter.
    pub n_train_studies: usize,
    pub phantom: PhantomConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            size: 5,
            vary_lesion_count: true,
            max_shift_mm: 0.0,
            max_rotation_deg: 0.0,
            n_train_studies: 1,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    /// Margin in voxels added around each lesion to form threshold-union boxes.
    pub roi_margin_vox: usize,
    /// Components smaller than this are dropped by the rule-based segmenter.
    pub min_ml: f64,
    /// Pretrained parameters for the model segmenter; trained in-run when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            kind: SegmenterKind::Oracle,
            roi_margin_vox: 2,
            min_ml: 0.2,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub cohort: CohortConfig,
    pub segmenter: SegmenterConfig,
    pub alignment: Alignment,
    pub registration: RegistrationConfig,
    /// Keep only PET2 components overlapping the propagated PET1 prediction.
    pub mpdr: bool,
    pub network: LasNetConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    /// Extra per-group reports: `sex`, `age`, `weight`, `dose` or `scanner`.
    pub group_by: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            cohort: CohortConfig::default(),
            segmenter: SegmenterConfig::default(),
            alignment: Alignment::Known,
            registration: RegistrationConfig::default(),
            mpdr: false,
            network: LasNetConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            group_by: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> CliResult<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).stage(Stage::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::msg(Stage::Config, format!("reading {}: {e}", path.display())))?;
        PipelineConfig::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::msg(
                Stage::Config,
                format!("unsupported config schema_version {}", self.schema_version),
            ));
        }
        if self.cohort.size == 0 {
            return Err(CliError::msg(Stage::Config, "cohort.size must be at least 1"));
        }
        if !(self.cohort.max_shift_mm >= 0.0) || !(self.cohort.max_rotation_deg >= 0.0) {
            return Err(CliError::msg(Stage::Config, "misregistration bounds must be non-negative"));
        }
        if !(self.segmenter.min_ml >= 0.0) {
            return Err(CliError::msg(Stage::Config, "segmenter.min_ml must be non-negative"));
        }
        self.cohort.phantom.validate().stage(Stage::Config)?;
        self.infer.validate().stage(Stage::Config)?;
        self.eval.thresholds.validate().stage(Stage::Config)?;
        if self.segmenter.kind == SegmenterKind::Model {
            self.network.validate().stage(Stage::Config)?;
            self.train.validate().stage(Stage::Config)?;
            if self.segmenter.checkpoint.is_none() && self.cohort.n_train_studies == 0 {
                return Err(CliError::msg(
                    Stage::Config,
                    "model segmenter needs a checkpoint or cohort.n_train_studies > 0",
                ));
            }
        }
        if let Some(k) = &self.group_by {
            if GroupKey::parse(k).is_none() {
                return Err(CliError::msg(Stage::Config, format!("unknown group_by key {k}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so equivalent files hash alike.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

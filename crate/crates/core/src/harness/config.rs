use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentParams, AugmentSet};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::synth::SynthParams;
use crate::tensor::AdamConfig;

/// Where samples come from. Without `dir`, `volumes` volumes are generated
/// in memory from `synth` with seeds `synth.seed + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-data` (holds `manifest.jsonl`).
    pub dir: Option<PathBuf>,
    pub volumes: usize,
    /// Train / val / test fractions over the concatenated crossline axis.
    pub fractions: [f64; 3],
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            volumes: 12,
            fractions: [8.0 / 12.0, 2.0 / 12.0, 2.0 / 12.0],
            synth: SynthParams::default(),
        }
    }
}

/// Settings for the pretext stage that sweeps and the convergence
/// comparison run before each finetune.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextStage {
    pub steps: usize,
    pub lr: f64,
}

impl Default for PretextStage {
    fn default() -> Self {
        PretextStage { steps: 1000, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Adjacent slices per sample. Overrides `model.encoder.input_channels`.
    pub m: usize,
    pub lambda_p: f32,
    /// Balance factor. Overrides `model.encoder.balance`.
    pub balance: f32,
    pub augmentation: AugmentSet,
    pub augment_params: AugmentParams,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Extra Gaussian noise added to pretext inputs.
    pub pretext_noise: f64,
    pub pretext: PretextStage,
    /// Source checkpoint for finetuning.
    pub backbone: Option<PathBuf>,
    /// Where the trained model is written.
    pub checkpoint: Option<PathBuf>,
    /// Where the run report (and evaluation files) are written.
    pub report: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Finetune,
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            m: 5,
            lambda_p: 1e-4,
            balance: 0.5,
            augmentation: AugmentSet::None,
            augment_params: AugmentParams::default(),
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretext_noise: 0.5,
            pretext: PretextStage::default(),
            backbone: None,
            checkpoint: None,
            report: None,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Model architecture with the top-level `m` and `balance` applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.encoder.input_channels = self.m;
        m.encoder.balance = self.balance;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.m == 0 || self.m.is_multiple_of(2) {
            return Err(Error::Config(format!("m must be odd, got {}", self.m)));
        }
        if !(self.lambda_p >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_p {} must be non-negative",
                self.lambda_p
            )));
        }
        if self.mode == Mode::Finetune && self.backbone.is_none() {
            return Err(Error::Config("mode finetune requires a backbone checkpoint".into()));
        }
        if self.mode == Mode::Inference {
            return Err(Error::Config("mode inference cannot be trained".into()));
        }
        self.augment_params.validate()?;
        self.model_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"steps": 3, "stepz": 4}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
        let nested = serde_json::from_str::<TrainConfig>(r#"{"model": {"encoder": {"depht": 2}}}"#);
        assert!(nested.is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let pre = TrainConfig::from_file(&dir.join("pretrain.json")).unwrap();
        assert_eq!(pre.steps, 1000);
        let ft = TrainConfig::from_file(&dir.join("finetune.json")).unwrap();
        assert_eq!(ft.mode, Mode::Finetune);
        ft.validate().unwrap();
    }

    #[test]
    fn finetune_needs_backbone() {
        let cfg = TrainConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            backbone: Some("bb".into()),
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        let cfg = TrainConfig {
            mode: Mode::Pretext,
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_field_round_trips() {
        let cfg = TrainConfig {
            m: 3,
            seed: 9,
            backbone: Some("x".into()),
            ..TrainConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.model_config().encoder.input_channels, 3);
    }
}

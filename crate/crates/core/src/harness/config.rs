use serde::{Deserialize, Serialize};

use crate::conditioner::{ConditionerMode, Provenance, Task};
use crate::decoders::{AsrDecoderConfig, ClsDecoderConfig};
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::model::{ConditioningConfig, ModelConfig};
use crate::synthdata::CorpusSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    #[default]
    FrozenBaseline,
    FullFinetune,
    CaDual,
    #[serde(alias = "ca_hier_L")]
    CaHierL,
    #[serde(alias = "ca_hier_LS")]
    CaHierLs,
}

impl ExperimentMode {
    pub fn is_conditioned(self) -> bool {
        matches!(self, ExperimentMode::CaDual | ExperimentMode::CaHierL | ExperimentMode::CaHierLs)
    }

    pub fn encoder_mode(self) -> EncoderMode {
        match self {
            ExperimentMode::FrozenBaseline | ExperimentMode::FullFinetune => EncoderMode::FrozenBaseline,
            ExperimentMode::CaDual => EncoderMode::CaDualPass,
            ExperimentMode::CaHierL | ExperimentMode::CaHierLs => EncoderMode::CaSinglePass,
        }
    }

    pub fn conditioned_tasks(self) -> Vec<Task> {
        match self {
            ExperimentMode::CaDual | ExperimentMode::CaHierL => vec![Task::Lid],
            ExperimentMode::CaHierLs => vec![Task::Lid, Task::Sv],
            _ => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the stage's steps with a linear learning-rate warmup.
    pub warmup: f64,
}

impl Default for StageHyper {
    fn default() -> Self {
        StageHyper {
            epochs: 4,
            lr: 1e-3,
            batch_size: 16,
            warmup: 0.0,
        }
    }
}

impl StageHyper {
    fn with(epochs: usize, lr: f64, warmup: f64) -> Self {
        StageHyper {
            epochs,
            lr,
            batch_size: 16,
            warmup,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub asr: f64,
    pub lid: f64,
    pub sv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            asr: 1.0,
            lid: 1.0,
            sv: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub pretext: StageHyper,
    pub decoders: StageHyper,
    pub ca_l: StageHyper,
    pub sv_decoder: StageHyper,
    pub ca_ls: StageHyper,
    pub full_finetune: StageHyper,
    pub loss_weights: LossWeights,
    /// Probability that a frame starts a masked span in the pretext task.
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::Adam,
            pretext: StageHyper::with(6, 1e-3, 0.0),
            decoders: StageHyper::with(10, 2e-3, 0.0),
            ca_l: StageHyper::with(6, 1e-3, 0.0),
            sv_decoder: StageHyper::with(2, 2e-4, 0.05),
            ca_ls: StageHyper::with(3, 2e-4, 0.05),
            full_finetune: StageHyper::with(2, 5e-4, 0.0),
            loss_weights: LossWeights::default(),
            mask_prob: 0.15,
            mask_span: 3,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: ExperimentMode,
    pub conditioner: ConditionerMode,
    pub provenance: Provenance,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    /// Widths and regularization of the conditioners. Which tasks condition,
    /// the conditioner type and the LID provenance follow from the fields
    /// above.
    pub conditioning: ConditioningConfig,
    pub lid: ClsDecoderConfig,
    pub sv: ClsDecoderConfig,
    pub asr: AsrDecoderConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            mode: ExperimentMode::CaHierL,
            conditioner: ConditionerMode::Cc,
            provenance: Provenance::Embedding,
            lid: ClsDecoderConfig::lid(corpus.total_languages()),
            sv: ClsDecoderConfig::sv(corpus.sv_train_speakers),
            asr: AsrDecoderConfig {
                vocab: corpus.vocab_size + 1,
                ..Default::default()
            },
            corpus,
            encoder: EncoderConfig::default(),
            conditioning: ConditioningConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The model configuration implied by the experiment: corpus-derived
    /// sizes and the conditioning set-up of the chosen mode.
    pub fn model_config(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.mode = self.mode.encoder_mode();
        encoder.input_dim = self.corpus.feature_dim;
        let mut conditioning = self.conditioning.clone();
        conditioning.mode = self.conditioner;
        conditioning.tasks = self.mode.conditioned_tasks();
        conditioning.lid_provenance = self.provenance;
        let mut lid = self.lid.clone();
        lid.num_classes = self.corpus.total_languages();
        let mut sv = self.sv.clone();
        sv.num_classes = self.corpus.sv_train_speakers;
        let mut asr = self.asr.clone();
        asr.vocab = self.corpus.vocab_size + 1;
        ModelConfig {
            encoder,
            conditioning,
            lid,
            sv,
            asr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.provenance != Provenance::Embedding && !self.mode.is_conditioned() {
            return Err(Error::Config(format!(
                "provenance {:?} requires a conditioning mode",
                self.provenance
            )));
        }
        self.corpus.validate()?;
        self.model_config().validate()?;
        let t = &self.training;
        for (name, h) in [
            ("pretext", t.pretext),
            ("decoders", t.decoders),
            ("ca_l", t.ca_l),
            ("sv_decoder", t.sv_decoder),
            ("ca_ls", t.ca_ls),
            ("full_finetune", t.full_finetune),
        ] {
            if h.batch_size == 0 || !(h.lr >= 0.0) || !(0.0..=1.0).contains(&h.warmup) {
                return Err(Error::Config(format!("invalid hyperparameters for stage {name}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn ground_truth_requires_conditioning() {
        let text = r#"{"mode": "frozen_baseline", "provenance": "ground_truth"}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 9}"#).is_err());
    }

    #[test]
    fn model_config_follows_mode() {
        let cfg = ExperimentConfig {
            mode: ExperimentMode::CaHierLs,
            conditioner: ConditionerMode::Tcac,
            ..Default::default()
        };
        let m = cfg.model_config();
        assert_eq!(m.encoder.mode, EncoderMode::CaSinglePass);
        assert_eq!(m.conditioning.tasks, vec![Task::Lid, Task::Sv]);
        assert_eq!(m.conditioning.mode, ConditionerMode::Tcac);
        assert_eq!(m.lid.num_classes, 12);
        assert_eq!(m.sv.num_classes, 30);
        assert_eq!(m.asr.vocab, 41);
    }
}

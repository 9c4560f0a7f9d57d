//! Run configuration: one TOML file describing data generation, model
//! shape, training, and evaluation. CLI flags override file values; every
//! command writes its resolved config beside its outputs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::models::Act;
use crate::synthdata::GeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmStrategy {
    /// Per-branch losses only, no cross-modality term.
    Simclr,
    /// Single NT-Xent over views of the concatenated two-branch feature.
    Concat,
    /// Cross-modality contrast through one projection head shared by both
    /// modalities.
    SepShared,
    /// Full joint loss with separate cross-modality heads per branch.
    SepSep,
}

impl fmt::Display for MmStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MmStrategy::Simclr => "simclr",
            MmStrategy::Concat => "concat",
            MmStrategy::SepShared => "sep_shared",
            MmStrategy::SepSep => "sep_sep",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MmStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(MmStrategy::Simclr),
            "concat" => Ok(MmStrategy::Concat),
            "sep_shared" => Ok(MmStrategy::SepShared),
            "sep_sep" => Ok(MmStrategy::SepSep),
            other => Err(Error::Config(format!(
                "unknown mm_strategy {other:?} (expected simclr|concat|sep_shared|sep_sep)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlStrategy {
    /// Cluster raw concatenated backbone features; classification heads
    /// consume them directly.
    NoProj,
    /// Per-label projection heads, no relation module.
    Proj,
    /// Bare self-attention relation module.
    Msa,
    /// One Transformer encoder layer.
    Tel,
    /// Two stacked encoder layers.
    Te,
}

impl fmt::Display for MlStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MlStrategy::NoProj => "no_proj",
            MlStrategy::Proj => "proj",
            MlStrategy::Msa => "msa",
            MlStrategy::Tel => "tel",
            MlStrategy::Te => "te",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MlStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_proj" => Ok(MlStrategy::NoProj),
            "proj" => Ok(MlStrategy::Proj),
            "msa" => Ok(MlStrategy::Msa),
            "tel" => Ok(MlStrategy::Tel),
            "te" => Ok(MlStrategy::Te),
            other => Err(Error::Config(format!(
                "unknown ml_strategy {other:?} (expected no_proj|proj|msa|tel|te)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Hidden widths between the modality input dim and `feature_dim`.
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Contrastive embedding dim Z.
    pub proj_dim: usize,
    /// Label-specific embedding dim.
    pub label_dim: usize,
    pub relation_ffn_dim: usize,
    pub relation_dropout: f64,
    pub activation: Act,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            feature_dim: 32,
            proj_dim: 128,
            label_dim: 512,
            relation_ffn_dim: 128,
            relation_dropout: 0.1,
            activation: Act::Relu,
        }
    }
}

impl ModelConfig {
    /// Shrunk dims for fast end-to-end runs; relation-module shape
    /// (1 head, ffn 128, dropout 0.1) stays fixed.
    pub fn desk() -> Self {
        Self {
            encoder_hidden: vec![48],
            feature_dim: 24,
            proj_dim: 32,
            label_dim: 48,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("feature_dim", self.feature_dim),
            ("proj_dim", self.proj_dim),
            ("label_dim", self.label_dim),
            ("relation_ffn_dim", self.relation_ffn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{f} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.relation_dropout) {
            return Err(Error::Config("model.relation_dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "train.{name}: batch_size/epochs/learning_rate must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mm_strategy: MmStrategy,
    pub ml_strategy: MlStrategy,
    /// Add the clinical-anchored mirror term to the cross-modality loss.
    pub mirror_mm: bool,
    /// Cluster pre-relation label embeddings instead of the relation
    /// module's outputs.
    pub cluster_pre_relation: bool,
    /// Let stage-2 gradients reach the encoders.
    pub unfreeze_encoders_stage2: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Hyperparameters as published: tuned for ResNet-50 scale.
    pub fn paper() -> Self {
        Self {
            stage1: StageConfig {
                batch_size: 96,
                learning_rate: 1e-6,
                epochs: 400,
            },
            stage2: StageConfig {
                batch_size: 256,
                learning_rate: 1e-4,
                epochs: 150,
            },
            tau: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            mm_strategy: MmStrategy::SepSep,
            ml_strategy: MlStrategy::Tel,
            mirror_mm: false,
            cluster_pre_relation: false,
            unfreeze_encoders_stage2: false,
            seed: 0,
        }
    }

    /// Desk-scale overrides for tractable runtimes on small MLP encoders.
    pub fn desk() -> Self {
        Self {
            stage1: StageConfig {
                batch_size: 64,
                learning_rate: 1e-3,
                epochs: 100,
            },
            stage2: StageConfig {
                batch_size: 64,
                learning_rate: 1e-3,
                epochs: 50,
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        if self.tau <= 0.0 {
            return Err(Error::Config("train.tau must be positive".into()));
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{f} must be in [0,1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub probe: StageConfig,
    pub finetune: StageConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: StageConfig {
                batch_size: 128,
                learning_rate: 1e-3,
                epochs: 50,
            },
            finetune: StageConfig {
                batch_size: 64,
                learning_rate: 1e-4,
                epochs: 50,
            },
        }
    }
}

impl EvalConfig {
    pub fn desk() -> Self {
        Self {
            probe: StageConfig {
                batch_size: 64,
                learning_rate: 1e-3,
                epochs: 10,
            },
            finetune: StageConfig {
                batch_size: 64,
                learning_rate: 1e-3,
                epochs: 40,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate("probe")?;
        self.finetune.validate("finetune")
    }
}

/// Union of everything a run needs; the single source of truth written
/// beside every output artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub augment: AugmentationPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Small, fast configuration for end-to-end desk runs.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig {
                n_samples: 1254,
                ..GeneratorConfig::default()
            },
            augment: AugmentationPolicy::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

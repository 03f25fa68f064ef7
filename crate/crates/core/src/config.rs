//! Experiment configuration. Every section rejects unknown keys and every
//! field has a documented default, so an empty file is a valid config.

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Width of every per-id embedding.
    pub dim: usize,
    /// Behavior sequences are truncated/padded to this length.
    pub max_seq_len: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            max_seq_len: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoMode {
    Cell,
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsrlConfig {
    /// Number of cross layers.
    pub layers: usize,
    pub margin: f64,
    /// Negatives per anchor.
    pub n_v: usize,
    pub geo_mode: GeoMode,
    /// Maximum timestamp gap of a positive pair, in seconds.
    pub time_window: i64,
    /// Use the triplet term exactly as printed (negated hinge of cos_pos - cos_neg + m).
    pub paper_literal_loss: bool,
}

impl Default for CsrlConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            margin: 0.3,
            n_v: 3,
            geo_mode: GeoMode::Region,
            time_window: 1800,
            paper_literal_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StpeConfig {
    pub heads: usize,
    pub d_k: usize,
}

impl Default for StpeConfig {
    fn default() -> Self {
        Self { heads: 2, d_k: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StifConfig {
    /// Hidden width of the gate perceptron.
    pub hidden: usize,
    /// Width of the learned per-feature id embedding fed to the gate.
    pub feature_id_dim: usize,
    /// Output `s * sum_j w_j` instead of per-feature gated embeddings.
    pub paper_literal: bool,
}

impl Default for StifConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_id_dim: 8,
            paper_literal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Weight of the CTR loss in the total loss; the contrastive loss gets 1 - alpha.
    pub alpha: f64,
    pub head_widths: Vec<usize>,
    /// Ablation variant trained by `train`, e.g. `full` or `w/o_CSRL`.
    pub variant: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            head_widths: vec![128, 64],
            variant: "full".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    /// Evaluate (and checkpoint, from the CLI) every this many steps; 0 means
    /// only at the end of each epoch.
    pub eval_every: usize,
    pub epsilon: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 3,
            lr0: 0.01,
            decay_rate: 0.95,
            decay_steps: 1000,
            eval_every: 0,
            epsilon: 1e-8,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of a single dataset held out for evaluation.
    pub test_fraction: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            batch_size: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Names of the grid rows to run; empty means all eight.
    pub configs: Vec<String>,
    pub seeds: Vec<u64>,
    /// Run grid cells on the rayon pool.
    pub parallel: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            configs: Vec::new(),
            seeds: vec![1, 2, 3],
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub generator: GeneratorConfig,
    pub embedding: EmbeddingConfig,
    pub csrl: CsrlConfig,
    pub stpe: StpeConfig,
    pub stif: StifConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: "runs".into(),
            generator: GeneratorConfig::default(),
            embedding: EmbeddingConfig::default(),
            csrl: CsrlConfig::default(),
            stpe: StpeConfig::default(),
            stif: StifConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn cfg_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.embedding.dim == 0 || self.embedding.max_seq_len == 0 {
            return Err(cfg_err("embedding.dim and embedding.max_seq_len must be positive"));
        }
        if self.csrl.layers == 0 {
            return Err(cfg_err("csrl.layers must be at least 1"));
        }
        if !(0.0..=2.0).contains(&self.csrl.margin) {
            return Err(cfg_err("csrl.margin must lie in [0, 2]"));
        }
        if self.csrl.n_v == 0 {
            return Err(cfg_err("csrl.n_v must be at least 1"));
        }
        if self.stpe.heads == 0 || self.stpe.d_k == 0 {
            return Err(cfg_err("stpe.heads and stpe.d_k must be positive"));
        }
        if self.stif.hidden == 0 || self.stif.feature_id_dim == 0 {
            return Err(cfg_err("stif.hidden and stif.feature_id_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.model.alpha) {
            return Err(cfg_err("model.alpha must lie in [0, 1]"));
        }
        if self.model.head_widths.contains(&0) {
            return Err(cfg_err("model.head_widths entries must be positive"));
        }
        crate::model::AblationSwitches::from_name(&self.model.variant)?;
        let t = &self.train;
        if t.batch_size < 4 {
            return Err(cfg_err("train.batch_size must be at least 4"));
        }
        if t.epochs == 0 || t.decay_steps == 0 {
            return Err(cfg_err("train.epochs and train.decay_steps must be positive"));
        }
        if !(t.lr0 > 0.0) || !(t.decay_rate > 0.0 && t.decay_rate <= 1.0) || !(t.epsilon > 0.0) {
            return Err(cfg_err(
                "train.lr0 > 0, 0 < train.decay_rate <= 1 and train.epsilon > 0 are required",
            ));
        }
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) || self.eval.batch_size == 0 {
            return Err(cfg_err(
                "eval.test_fraction must lie in (0, 1) and eval.batch_size be positive",
            ));
        }
        for name in &self.ablation.configs {
            crate::model::AblationSwitches::from_name(name)?;
        }
        Ok(())
    }
}

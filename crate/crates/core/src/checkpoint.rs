//! Versioned JSON checkpoints of parameters, optimizer state and metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{AblationSwitches, Cspm, ModelSpec};
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::trainer::{OptimizerState, StepMetrics, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: String,
    /// Seed of the training run (initialization, shuffling, mining).
    pub seed: u64,
    pub step: u64,
    pub config: ExperimentConfig,
    pub params: Vec<NamedTensor>,
    /// Adagrad accumulators, in parameter order.
    pub accumulators: Vec<NamedTensor>,
    pub history: Vec<StepMetrics>,
}

fn ck_err(tensor: &str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn capture<T: Scalar>(trainer: &Trainer<T>, config: &ExperimentConfig, variant: &str) -> Self {
        let store = &trainer.model.params;
        let params = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        let accumulators = store
            .iter()
            .map(|(id, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: trainer.state.accum[id.index()]
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            variant: variant.to_string(),
            seed: trainer.seed,
            step: trainer.state.step,
            config: config.clone(),
            params,
            accumulators,
            history: trainer.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| ck_err("<file>", e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ck_err(
                "<file>",
                format!(
                    "version {} is not supported (expected {CHECKPOINT_VERSION})",
                    ck.version
                ),
            ));
        }
        Ok(ck)
    }

    /// Copies stored values into `store`, requiring the same parameter
    /// names and shapes.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let values = match_tensors(&self.params, store)?;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, v) in ids.into_iter().zip(values) {
            store.get_mut(id).value = v;
        }
        Ok(())
    }

    /// Rebuilds a model from the stored config and variant, then loads the
    /// parameters. `config` (if given) overrides the stored one and must
    /// produce matching shapes.
    pub fn model<T: Scalar>(&self, config: Option<&ExperimentConfig>) -> Result<Cspm<T>> {
        let cfg = config.unwrap_or(&self.config);
        let switches = AblationSwitches::from_name(&self.variant)?;
        let mut model = Cspm::new(ModelSpec::from_config(cfg), switches, self.seed)?;
        self.restore_params(&mut model.params)?;
        Ok(model)
    }

    /// Trainer positioned exactly where this checkpoint was taken.
    pub fn trainer<T: Scalar>(&self, config: Option<&ExperimentConfig>) -> Result<Trainer<T>> {
        let cfg = config.unwrap_or(&self.config);
        let model = self.model::<T>(config)?;
        let mut trainer = Trainer::new(model, cfg.train.clone(), self.seed);
        trainer.eval_batch_size = cfg.eval.batch_size;
        let accum = match_tensors::<T>(&self.accumulators, &trainer.model.params)?;
        trainer.state = OptimizerState {
            accum: accum.into_iter().map(Tensor::into_data).collect(),
            step: self.step,
            ..trainer.state
        };
        trainer.history = self.history.clone();
        Ok(trainer)
    }
}

fn match_tensors<T: Scalar>(stored: &[NamedTensor], store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
    for (_, p) in store.iter() {
        if !stored.iter().any(|t| t.name == p.name) {
            return Err(ck_err(&p.name, "missing from checkpoint"));
        }
    }
    if let Some(extra) = stored.iter().find(|t| store.id(&t.name).is_none()) {
        return Err(ck_err(&extra.name, "not a parameter of the configured model"));
    }
    store
        .iter()
        .map(|(_, p)| {
            let t = stored.iter().find(|t| t.name == p.name).expect("checked above");
            if t.shape != p.value.shape() {
                return Err(ck_err(
                    &p.name,
                    format!("shape {:?} in checkpoint, {:?} in model", t.shape, p.value.shape()),
                ));
            }
            Tensor::<f64>::new(t.shape.clone(), t.data.clone())
                .map(|v| v.cast::<T>())
                .map_err(|e| ck_err(&p.name, e.to_string()))
        })
        .collect()
}

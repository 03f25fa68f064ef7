//! Adagrad with exponential learning-rate decay and the mini-batch training
//! loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::EvalResult;
use crate::model::Cspm;
use crate::rng::{derive_seed_n, seeded};
use crate::tensor::{Gradients, ParamGrad, ParamKind, ParamStore, Scalar};

/// Per-parameter squared-gradient accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// Indexed like the parameter store.
    pub accum: Vec<Vec<T>>,
    pub step: u64,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub epsilon: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self {
            accum: params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect(),
            step: 0,
            lr0: cfg.lr0,
            decay_rate: cfg.decay_rate,
            decay_steps: cfg.decay_steps as u64,
            epsilon: cfg.epsilon,
        }
    }

    /// `lr0 * decay_rate^(t / decay_steps)` with a continuous exponent.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr0 * self.decay_rate.powf(t as f64 / self.decay_steps as f64)
    }

    /// Applies one update at the current step and advances the counter.
    /// Row 0 of every embedding table is never touched. Any non-finite
    /// gradient aborts before a single parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NanGradient(params.get(id).name.clone()));
            }
        }
        let lr = T::from_f64_lossy(self.lr_at(self.step));
        let eps = T::from_f64_lossy(self.epsilon);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            let acc = &mut self.accum[id.index()];
            let theta = p.value.data_mut();
            let update = |theta: &mut [T], acc: &mut [T], g: &[T]| {
                for ((t, a), &gv) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
                    *a += gv * gv;
                    *t -= lr * gv / (a.sqrt() + eps);
                }
            };
            match g {
                ParamGrad::Dense(g) => {
                    let skip = match p.kind {
                        ParamKind::Embedding => p.value.shape()[1],
                        ParamKind::Dense => 0,
                    };
                    let theta = p.value.data_mut();
                    update(&mut theta[skip..], &mut acc[skip..], &g[skip..]);
                }
                ParamGrad::Rows { dim, rows } => {
                    for (&r, g) in rows {
                        if r == 0 {
                            continue;
                        }
                        let span = r * dim..(r + 1) * dim;
                        update(&mut theta[span.clone()], &mut acc[span], g);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_ctr: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub lr: f64,
    pub eval_auc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_ctr,l_cl,l_total,lr,eval_auc";

pub fn metrics_csv(history: &[StepMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        let auc = m.eval_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", m.step, m.l_ctr, m.l_cl, m.l_total, m.lr, auc);
    }
    out
}

pub fn write_metrics_csv(history: &[StepMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(history)).map_err(|e| Error::io(path, e))
}

/// Owns a model and its optimizer state across (possibly resumed) training.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Cspm<T>,
    pub state: OptimizerState<T>,
    pub config: TrainConfig,
    /// Seeds shuffling and pair mining.
    pub seed: u64,
    pub eval_batch_size: usize,
    pub history: Vec<StepMetrics>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Cspm<T>, config: TrainConfig, seed: u64) -> Self {
        let state = OptimizerState::new(&model.params, &config);
        Self {
            model,
            state,
            config,
            seed,
            eval_batch_size: 1024,
            history: Vec::new(),
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train / self.config.batch_size
    }

    /// Sample order of an epoch: a Fisher-Yates shuffle seeded by
    /// `(seed, epoch)`, independent of how many epochs are run.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeded(derive_seed_n(self.seed, "shuffle", epoch as u64), "epoch");
        order.shuffle(&mut rng);
        order
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalResult> {
        let probs = self.model.predict(samples, self.eval_batch_size)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        EvalResult::from_probabilities(&probs, &labels)
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepMetrics> {
        let step = self.state.step;
        let mut rng = seeded(derive_seed_n(self.seed, "mine", step), "batch");
        let mut g = crate::tensor::Graph::new();
        let parts = self.model.loss(&mut g, batch, &mut rng)?;
        let l_total = g.value(parts.total).item()?.to_f64_lossy();
        g.backward(parts.total)?;
        let grads = g.take_param_grads();
        let lr = self.state.lr_at(step);
        self.state.step(&mut self.model.params, &grads)?;
        Ok(StepMetrics {
            step: step + 1,
            l_ctr: parts.l_ctr,
            l_cl: parts.l_cl,
            l_total,
            lr,
            eval_auc: None,
        })
    }

    /// Trains until `config.epochs` epochs are complete, continuing from the
    /// current step. Evaluates on `eval` every `eval_every` steps and at the
    /// end of each epoch; `on_eval` runs after each evaluation (e.g. to save
    /// a checkpoint).
    pub fn train(
        &mut self,
        train: &[Sample],
        eval: Option<&[Sample]>,
        mut on_eval: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        if train.len() < self.config.batch_size {
            return Err(Error::Config(format!(
                "training set of {} samples is smaller than one batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        let per_epoch = self.steps_per_epoch(train.len());
        let total = (per_epoch * self.config.epochs) as u64;
        let bs = self.config.batch_size;
        while self.state.step < total {
            let epoch = (self.state.step / per_epoch as u64) as usize;
            let order = self.epoch_order(train.len(), epoch);
            let start = (self.state.step % per_epoch as u64) as usize;
            for b in start..per_epoch {
                let batch: Vec<&Sample> = order[b * bs..(b + 1) * bs].iter().map(|&i| &train[i]).collect();
                let mut m = self.train_step(&batch)?;
                let end_of_epoch = b + 1 == per_epoch;
                let periodic = self.config.eval_every > 0 && m.step % self.config.eval_every as u64 == 0;
                let evaluate = end_of_epoch || periodic;
                if let (true, Some(ev)) = (evaluate, eval) {
                    m.eval_auc = Some(self.evaluate(ev)?.auc);
                }
                self.history.push(m);
                if evaluate {
                    on_eval(self)?;
                }
            }
        }
        Ok(())
    }
}

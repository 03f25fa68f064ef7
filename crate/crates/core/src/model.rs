//! The composed model: embeddings, SAR encoder, preference extractor,
//! feature filter and prediction head, plus the loss functions and the
//! ablation switches.

use rand::Rng;
use rayon::prelude::*;

use crate::config::{CsrlConfig, EmbeddingConfig, ExperimentConfig, StifConfig, StpeConfig};
use crate::csrl::{encode_sar, mine_pairs, triplet_loss, CrossNetwork, MinedPairs, TripletConfig};
use crate::data::{Sample, Vocab};
use crate::embedding::{embed_batch, EmbeddingTables, EVENT_ATTRS, ITEM_ATTRS, SEARCH_FIELDS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::stif::{stif_forward, GateParams};
use crate::stpe::{stpe_forward, AttentionParams};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationSwitches {
    pub use_csrl_loss: bool,
    pub use_cross_network: bool,
    pub use_stpe: bool,
    pub use_stif: bool,
    /// Feed the SAR into the attention query next to the candidate item.
    pub attention_query_sar: bool,
}

/// The eight ablation rows, in table order.
pub const ABLATION_GRID: [&str; 8] = [
    "full",
    "w/o_CSRL(L_CL)",
    "w/o_CSRL(DCN-v2)",
    "w/o_CSRL",
    "w/o_StPE",
    "w/o_StIF",
    "w/o_StPE+StIF",
    "w/o_CSRL+StPE+StIF",
];

/// Reference baselines outside the grid: `mlp` is the head over raw
/// embeddings (every module off), `din` adds attention over the sequence
/// queried by the candidate item alone.
pub const BASELINES: [&str; 2] = ["mlp", "din"];

impl AblationSwitches {
    pub const FULL: Self = Self {
        use_csrl_loss: true,
        use_cross_network: true,
        use_stpe: true,
        use_stif: true,
        attention_query_sar: true,
    };

    /// Looks up an ablation row by name. Spaces are accepted in place of
    /// underscores and case is ignored.
    pub fn from_name(name: &str) -> Result<Self> {
        let key = name.trim().replace(' ', "_").to_ascii_lowercase();
        let key = key.replace("_(", "(");
        let f = Self::FULL;
        let s = match key.as_str() {
            "full" => f,
            "w/o_csrl(l_cl)" => Self {
                use_csrl_loss: false,
                ..f
            },
            "w/o_csrl(dcn-v2)" => Self {
                use_cross_network: false,
                ..f
            },
            "w/o_csrl" => Self {
                use_csrl_loss: false,
                use_cross_network: false,
                ..f
            },
            "w/o_stpe" => Self { use_stpe: false, ..f },
            "w/o_stif" => Self { use_stif: false, ..f },
            "w/o_stpe+stif" => Self {
                use_stpe: false,
                use_stif: false,
                ..f
            },
            "w/o_csrl+stpe+stif" | "mlp" => Self {
                use_csrl_loss: false,
                use_cross_network: false,
                use_stpe: false,
                use_stif: false,
                attention_query_sar: false,
            },
            "din" => Self {
                use_csrl_loss: false,
                use_cross_network: false,
                use_stpe: true,
                use_stif: false,
                attention_query_sar: false,
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation variant '{name}'; expected one of {}, {}",
                    ABLATION_GRID.join(", "),
                    BASELINES.join(", ")
                )))
            }
        };
        Ok(s)
    }
}

/// Architecture hyperparameters and vocabulary sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub vocab: Vocab,
    pub grid_size: usize,
    pub embedding: EmbeddingConfig,
    pub csrl: CsrlConfig,
    pub stpe: StpeConfig,
    pub stif: StifConfig,
    pub head_widths: Vec<usize>,
    pub alpha: f64,
}

impl ModelSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            vocab: cfg.generator.vocab(),
            grid_size: cfg.generator.grid_size,
            embedding: cfg.embedding.clone(),
            csrl: cfg.csrl.clone(),
            stpe: cfg.stpe.clone(),
            stif: cfg.stif.clone(),
            head_widths: cfg.model.head_widths.clone(),
            alpha: cfg.model.alpha,
        }
    }

    pub fn d_s(&self) -> usize {
        SEARCH_FIELDS * self.embedding.dim
    }

    pub fn d_item(&self) -> usize {
        ITEM_ATTRS * self.embedding.dim
    }

    pub fn d_seq(&self) -> usize {
        EVENT_ATTRS * self.embedding.dim
    }

    pub fn n_features(&self) -> usize {
        self.vocab.user_feats.len() + self.vocab.context_feats.len()
    }

    pub fn triplet(&self) -> TripletConfig {
        TripletConfig::from_config(&self.csrl, self.grid_size)
    }

    fn filter_width(&self) -> usize {
        if self.stif.paper_literal {
            self.d_s()
        } else {
            self.n_features() * self.embedding.dim
        }
    }

    /// Width of the head input; the same for every switch setting so that
    /// ablations share the head initialization.
    pub fn head_input_width(&self) -> usize {
        self.stpe.heads * self.stpe.d_k + self.filter_width() + self.d_item() + self.d_s()
    }
}

#[derive(Debug, Clone)]
pub struct Cspm<T: Scalar> {
    pub spec: ModelSpec,
    pub switches: AblationSwitches,
    pub params: ParamStore<T>,
    pub tables: EmbeddingTables,
    pub cross: Option<CrossNetwork>,
    pub attention: Option<AttentionParams>,
    pub gate: Option<GateParams>,
    pub head: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B]` pre-sigmoid scores.
    pub logits: Var,
    /// `[B, d_s]`: the SAR, or the raw search-state concatenation without
    /// the cross network.
    pub sar: Var,
    /// `[B, F]` when the filter is on.
    pub gates: Option<Var>,
    /// Per-head `[B, 1, T]` attention weights when the extractor is on.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub l_ctr: f64,
    /// 0 when the contrastive term is off or no triplets were mined.
    pub l_cl: f64,
    pub mined: Option<MinedPairs>,
}

impl<T: Scalar> Cspm<T> {
    /// Every parameter is initialized from a stream keyed by its name, so
    /// models that differ only in switches share the values of the
    /// parameters they have in common.
    pub fn new(spec: ModelSpec, switches: AblationSwitches, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let tables = EmbeddingTables::build(&mut params, &spec.vocab, spec.embedding.dim, seed)?;
        let cross = switches
            .use_cross_network
            .then(|| CrossNetwork::build(&mut params, spec.d_s(), spec.csrl.layers, seed))
            .transpose()?;
        let attention = switches
            .use_stpe
            .then(|| {
                let d_query = spec.d_item() + if switches.attention_query_sar { spec.d_s() } else { 0 };
                AttentionParams::build(&mut params, d_query, spec.d_seq(), spec.stpe.heads, spec.stpe.d_k, seed)
            })
            .transpose()?;
        let gate = switches
            .use_stif
            .then(|| {
                GateParams::build(
                    &mut params,
                    spec.d_s(),
                    spec.embedding.dim,
                    spec.n_features(),
                    spec.stif.hidden,
                    spec.stif.feature_id_dim,
                    seed,
                )
            })
            .transpose()?;
        let mut head = Vec::new();
        let mut fan_in = spec.head_input_width();
        for (i, &w) in spec.head_widths.iter().enumerate() {
            head.push(Linear::build(&mut params, &format!("head.{i}"), fan_in, w, seed)?);
            fan_in = w;
        }
        head.push(Linear::build(&mut params, "head.out", fan_in, 1, seed)?);
        Ok(Self {
            spec,
            switches,
            params,
            tables,
            cross,
            attention,
            gate,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &[&Sample]) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("forward needs a nonempty batch".into()));
        }
        let b = batch.len();
        let p = &self.params;
        let f = embed_batch(g, p, &self.tables, batch, self.spec.embedding.max_seq_len)?;
        let sar = encode_sar(g, p, self.cross.as_ref(), f.query, f.location, f.time)?;

        let (u, attention) = match &self.attention {
            Some(att) => {
                let query_sar = self.switches.attention_query_sar.then_some(sar);
                let out = stpe_forward(g, p, att, f.item, query_sar, f.seq, &f.seq_mask)?;
                (out.u, out.weights)
            }
            None => {
                let w = self.spec.stpe.heads * self.spec.stpe.d_k;
                (g.constant(Tensor::zeros(&[b, w])), Vec::new())
            }
        };

        let features: Vec<Var> = f.user.iter().chain(&f.context).copied().collect();
        let (o, gates) = match &self.gate {
            Some(gate) => {
                let out = stif_forward(g, p, gate, sar, &features, self.spec.stif.paper_literal)?;
                (out.o, Some(out.gates))
            }
            None if self.spec.stif.paper_literal => (g.constant(Tensor::zeros(&[b, self.spec.d_s()])), None),
            None => (g.concat(&features, 1)?, None),
        };

        let mut x = g.concat(&[u, o, f.item, sar], 1)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        let logits = g.reshape(x, &[b])?;
        Ok(ForwardOutput {
            logits,
            sar,
            gates,
            attention,
        })
    }

    /// Builds the training objective for one batch. The contrastive term is
    /// added only when enabled and `alpha < 1`; only then is `rng` used.
    pub fn loss<R: Rng>(&self, g: &mut Graph<T>, batch: &[&Sample], rng: &mut R) -> Result<LossParts> {
        let alpha = self.spec.alpha;
        check_alpha(alpha)?;
        let out = self.forward(g, batch)?;
        let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
        let l_ctr = ctr_loss(g, out.logits, &labels)?;
        let l_ctr_value = g.value(l_ctr).item()?.to_f64_lossy();
        if !self.switches.use_csrl_loss || alpha == 1.0 {
            return Ok(LossParts {
                total: l_ctr,
                l_ctr: l_ctr_value,
                l_cl: 0.0,
                mined: None,
            });
        }
        let cfg = self.spec.triplet();
        let mined = mine_pairs(batch, &cfg, rng);
        let l_cl = triplet_loss(g, out.sar, &mined, &cfg)?;
        let l_cl_value = g.value(l_cl).item()?.to_f64_lossy();
        let total = total_loss(g, l_ctr, l_cl, alpha)?;
        Ok(LossParts {
            total,
            l_ctr: l_ctr_value,
            l_cl: l_cl_value,
            mined: Some(mined),
        })
    }

    /// Click probabilities, evaluated in chunks of `batch_size` on the rayon
    /// pool. Output order follows `samples`.
    pub fn predict(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
        let chunks: Vec<Vec<f64>> = samples
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let mut g = Graph::new();
                let out = self.forward(&mut g, &refs)?;
                Ok(g.value(out.logits)
                    .data()
                    .iter()
                    .map(|&l| sigmoid(l.to_f64_lossy()))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    /// SARs of `samples` as an `[n, d_s]` tensor.
    pub fn sar(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = embed_batch(
            &mut g,
            &self.params,
            &self.tables,
            samples,
            self.spec.embedding.max_seq_len,
        )?;
        let sar = encode_sar(&mut g, &self.params, self.cross.as_ref(), f.query, f.location, f.time)?;
        Ok(g.value(sar).clone())
    }

    /// Zeroes the output layer of the head, making every prediction 0.5.
    pub fn zero_head_output(&mut self) {
        if let Some(last) = self.head.last() {
            last.zero(&mut self.params);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// Mean binary cross-entropy computed from logits.
pub fn ctr_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let y: Vec<T> = labels.iter().map(|&l| T::from_f64_lossy(f64::from(l))).collect();
    g.bce_with_logits(logits, &y)
}

/// `alpha * l_ctr + (1 - alpha) * l_cl`; the boundaries return the
/// corresponding term unchanged.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_ctr: Var, l_cl: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(l_ctr);
    }
    if alpha == 0.0 {
        return Ok(l_cl);
    }
    let a = g.scale(l_ctr, T::from_f64_lossy(alpha))?;
    let c = g.scale(l_cl, T::from_f64_lossy(1.0 - alpha))?;
    g.add(a, c)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_ctr: f64, l_cl: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_ctr + (1.0 - alpha) * l_cl)
}

//! Spatiotemporal information filter: SAR-conditioned scalar gates over the
//! user and context feature embeddings.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Sample, CONTEXT_FEATURES, USER_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{uniform, Linear};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

/// Gate perceptron shared by all features: `concat(s, z_j, e_j) -> hidden
/// (relu) -> 1 (sigmoid)`, where `e_j` is a learned per-feature id embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateParams {
    pub feature_ids: ParamId,
    pub hidden: Linear,
    pub out: Linear,
    pub d_s: usize,
    pub d_feature: usize,
    pub n_features: usize,
}

impl GateParams {
    /// The output layer starts at zero, so every gate starts at 0.5.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        d_s: usize,
        d_feature: usize,
        n_features: usize,
        hidden: usize,
        feature_id_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let fid = uniform::<T>(
            &[n_features, feature_id_dim],
            1.0 / (feature_id_dim as f64).sqrt(),
            seed,
            "stif.feature_ids",
        );
        let feature_ids = store.insert("stif.feature_ids", ParamKind::Dense, fid)?;
        let hidden_layer = Linear::build(store, "stif.hidden", d_s + d_feature + feature_id_dim, hidden, seed)?;
        let out = Linear::build(store, "stif.out", hidden, 1, seed)?;
        out.zero(store);
        Ok(Self {
            feature_ids,
            hidden: hidden_layer,
            out,
            d_s,
            d_feature,
            n_features,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GatedFeatures {
    /// `[B, F * d]` gated features, or `[B, d_s]` in literal mode.
    pub o: Var,
    /// `[B, F]`
    pub gates: Var,
}

/// `sar: [B, d_s]`, each feature `[B, d]`. Default: `o = concat_j(w_j z_j)`.
/// With `literal`, `o = s * sum_j w_j`.
pub fn stif_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GateParams,
    sar: Var,
    features: &[Var],
    literal: bool,
) -> Result<GatedFeatures> {
    let f = features.len();
    if f == 0 || f != params.n_features {
        return Err(Error::dim(
            "stif_forward",
            format!("{f} features for a gate built for {}", params.n_features),
        ));
    }
    let b = g.shape(sar)[0];
    if g.shape(sar) != [b, params.d_s] {
        return Err(Error::dim("stif_forward", format!("sar shape {:?}", g.shape(sar))));
    }
    for &z in features {
        if g.shape(z) != [b, params.d_feature] {
            return Err(Error::dim(
                "stif_forward",
                format!("feature shape {:?}, expected [{b}, {}]", g.shape(z), params.d_feature),
            ));
        }
    }
    let fid = g.param(store, params.feature_ids);
    let mut inputs = Vec::with_capacity(f);
    for (j, &z) in features.iter().enumerate() {
        let e = g.index_select(fid, &vec![j; b])?;
        inputs.push(g.concat(&[sar, z, e], 1)?);
    }
    // rows ordered feature-major: row j * B + i
    let x = g.concat(&inputs, 0)?;
    let h = params.hidden.forward(g, store, x)?;
    let h = g.relu(h)?;
    let logit = params.out.forward(g, store, h)?;
    let w = g.sigmoid(logit)?;
    let sample_major: Vec<usize> = (0..b).flat_map(|i| (0..f).map(move |j| j * b + i)).collect();
    let gates = g.index_select(w, &sample_major)?;
    let gates = g.reshape(gates, &[b, f])?;
    let o = if literal {
        let ones = g.constant(Tensor::full(&[f, 1], T::one()));
        let total = g.matmul(gates, ones)?;
        g.mul(sar, total)?
    } else {
        let z = g.concat(features, 0)?;
        let gated = g.mul(z, w)?;
        let gated = g.index_select(gated, &sample_major)?;
        g.reshape(gated, &[b, f * params.d_feature])?
    };
    Ok(GatedFeatures { o, gates })
}

pub fn feature_names() -> Vec<String> {
    USER_FEATURES
        .iter()
        .map(|n| format!("user.{n}"))
        .chain(CONTEXT_FEATURES.iter().map(|n| format!("context.{n}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStat {
    pub feature: String,
    pub mean: f64,
    pub var: f64,
}

/// Mean and (population) variance of each feature's gate over `samples`,
/// sorted by descending mean. Fails if the model was built without StIF.
pub fn gate_report<T: Scalar>(
    model: &crate::model::Cspm<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<GateStat>> {
    let names = feature_names();
    let mut sum = vec![0.0; names.len()];
    let mut sq = vec![0.0; names.len()];
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &refs)?;
        let gates = out
            .gates
            .ok_or_else(|| Error::State("gate report needs a model with the filter enabled".into()))?;
        for row in g.value(gates).data().chunks(names.len()) {
            for (j, v) in row.iter().enumerate() {
                let v = v.to_f64_lossy();
                sum[j] += v;
                sq[j] += v * v;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    let mut stats: Vec<GateStat> = names
        .into_iter()
        .enumerate()
        .map(|(j, feature)| {
            let mean = sum[j] / n;
            GateStat {
                feature,
                mean,
                var: (sq[j] / n - mean * mean).max(0.0),
            }
        })
        .collect();
    stats.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.feature.cmp(&b.feature)));
    Ok(stats)
}

pub fn write_gate_report_csv(stats: &[GateStat], path: &Path) -> Result<()> {
    let mut out = String::from("feature_name,mean_gate,var_gate\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{}", s.feature, s.mean, s.var);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

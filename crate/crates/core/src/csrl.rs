//! Search-state representation: the cross-network encoder producing the
//! spatiotemporal activation representation (SAR), in-batch pair mining, and
//! the triplet contrastive loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{CsrlConfig, GeoMode};
use crate::data::{region_of, Sample};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Stack of full-matrix cross layers `x_{l+1} = x_0 * (x_l W_l + b_l) + x_l`
/// (row-vector form, so `W_l` here is the transpose of the column-vector
/// weight).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossNetwork {
    pub layers: Vec<Linear>,
    pub width: usize,
}

impl CrossNetwork {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, width: usize, layers: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("cross network needs at least one layer".into()));
        }
        let layers: Vec<Linear> = (0..layers)
            .map(|l| Linear::build(store, &format!("cross.{l}"), width, width, seed))
            .collect::<Result<_>>()?;
        for l in &layers {
            l.zero(store);
        }
        Ok(Self { layers, width })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x0: Var) -> Result<Var> {
        let w = *g.shape(x0).last().unwrap_or(&0);
        if w != self.width {
            return Err(Error::dim(
                "cross_network",
                format!("input width {w}, network width {}", self.width),
            ));
        }
        let mut x = x0;
        for layer in &self.layers {
            let lin = layer.forward(g, store, x)?;
            let gated = g.mul(x0, lin)?;
            x = g.add(gated, x)?;
        }
        Ok(x)
    }
}

/// Concatenates the query, location and time embeddings (`[B, d]` each) and,
/// when a cross network is given, encodes them into the SAR. Without one the
/// raw concatenation is returned.
pub fn encode_sar<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cross: Option<&CrossNetwork>,
    query: Var,
    location: Var,
    time: Var,
) -> Result<Var> {
    let x0 = g.concat(&[query, location, time], 1)?;
    match cross {
        Some(net) => net.forward(g, store, x0),
        None => Ok(x0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub n_v: usize,
    /// Maximum timestamp gap of a positive pair, in seconds.
    pub time_window: i64,
    pub geo_mode: GeoMode,
    pub grid_size: usize,
    /// Use the negated-hinge form of the triplet term.
    pub literal: bool,
}

impl TripletConfig {
    pub fn from_config(cfg: &CsrlConfig, grid_size: usize) -> Self {
        Self {
            margin: cfg.margin,
            n_v: cfg.n_v,
            time_window: cfg.time_window,
            geo_mode: cfg.geo_mode,
            grid_size,
            literal: cfg.paper_literal_loss,
        }
    }

    fn geo_close(&self, a: usize, b: usize) -> bool {
        match self.geo_mode {
            GeoMode::Cell => a == b,
            GeoMode::Region => a == b || region_of(a, self.grid_size) == region_of(b, self.grid_size),
        }
    }

    /// Positive predicate: nearby cell, within the time window, and at least
    /// one shared query token. Symmetric; callers exclude `i == j`.
    pub fn is_positive_pair(&self, a: &Sample, b: &Sample) -> bool {
        self.geo_close(a.geohash_cell, b.geohash_cell)
            && (a.timestamp - b.timestamp).abs() <= self.time_window
            && a.query_tokens.iter().any(|t| b.query_tokens.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    /// `n_v` entries, drawn with replacement.
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub triplets: Vec<Triplet>,
    pub skipped_no_positive: usize,
    pub skipped_no_negative: usize,
}

/// For every anchor, the sorted indices `j != i` satisfying the positive
/// predicate.
pub fn positive_candidates(batch: &[&Sample], cfg: &TripletConfig) -> Vec<Vec<usize>> {
    let n = batch.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if cfg.is_positive_pair(batch[i], batch[j]) {
                out[i].push(j);
                out[j].push(i);
            }
        }
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

/// Mines one triplet per anchor that has both a positive and at least one
/// negative. The positive is drawn uniformly from the eligible ones; the
/// `n_v` negatives uniformly, with replacement, from the rest of the batch.
pub fn mine_pairs<R: Rng>(batch: &[&Sample], cfg: &TripletConfig, rng: &mut R) -> MinedPairs {
    let mut mined = MinedPairs::default();
    if batch.len() < 3 {
        mined.skipped_no_positive = batch.len();
        return mined;
    }
    let positives = positive_candidates(batch, cfg);
    let mut negatives = Vec::with_capacity(batch.len());
    for (i, pos) in positives.iter().enumerate() {
        let Some(&positive) = pos.choose(rng) else {
            mined.skipped_no_positive += 1;
            continue;
        };
        negatives.clear();
        negatives.extend((0..batch.len()).filter(|&j| j != i && pos.binary_search(&j).is_err()));
        if negatives.is_empty() {
            mined.skipped_no_negative += 1;
            continue;
        }
        let chosen = (0..cfg.n_v)
            .map(|_| negatives[rng.gen_range(0..negatives.len())])
            .collect();
        mined.triplets.push(Triplet {
            anchor: i,
            positive,
            negatives: chosen,
        });
    }
    mined
}

/// One hinge term. The default is `max(cos_neg - cos_pos + m, 0)`; the
/// literal variant is `-max(cos_pos - cos_neg + m, 0)`.
pub fn triplet_term(cos_pos: f64, cos_neg: f64, margin: f64, literal: bool) -> f64 {
    if literal {
        -(cos_pos - cos_neg + margin).max(0.0)
    } else {
        (cos_neg - cos_pos + margin).max(0.0)
    }
}

fn flatten(mined: &MinedPairs) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut p = Vec::new();
    let mut n = Vec::new();
    for t in &mined.triplets {
        for &neg in &t.negatives {
            a.push(t.anchor);
            p.push(t.positive);
            n.push(neg);
        }
    }
    (a, p, n)
}

/// Mean hinge over every (anchor, negative) combination of `mined`, where
/// rows of `sar` (`[B, d_s]`) are the batch SARs. No triplets gives a
/// constant 0.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<T>, sar: Var, mined: &MinedPairs, cfg: &TripletConfig) -> Result<Var> {
    if mined.triplets.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let (a, p, n) = flatten(mined);
    let anchors = g.index_select(sar, &a)?;
    let positives = g.index_select(sar, &p)?;
    let negatives = g.index_select(sar, &n)?;
    let cos_pos = g.cosine_rows(positives, anchors)?;
    let cos_neg = g.cosine_rows(negatives, anchors)?;
    let m = T::from_f64_lossy(cfg.margin);
    if cfg.literal {
        let diff = g.sub(cos_pos, cos_neg)?;
        let shifted = g.add_scalar(diff, m)?;
        let hinge = g.relu(shifted)?;
        let mean = g.mean(hinge)?;
        g.scale(mean, -T::one())
    } else {
        let diff = g.sub(cos_neg, cos_pos)?;
        let shifted = g.add_scalar(diff, m)?;
        let hinge = g.relu(shifted)?;
        g.mean(hinge)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cos(anchor, positive) minus mean cos(anchor, negative) over all
/// mined combinations, or `None` without triplets.
pub fn separation<T: Scalar>(sar: &Tensor<T>, mined: &MinedPairs) -> Option<f64> {
    if mined.triplets.is_empty() {
        return None;
    }
    let rows: Vec<Vec<f64>> = (0..sar.shape()[0])
        .map(|i| sar.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let (a, p, n) = flatten(mined);
    let k = a.len() as f64;
    let pos: f64 = a.iter().zip(&p).map(|(&i, &j)| cosine(&rows[i], &rows[j])).sum();
    let neg: f64 = a.iter().zip(&n).map(|(&i, &j)| cosine(&rows[i], &rows[j])).sum();
    Some((pos - neg) / k)
}

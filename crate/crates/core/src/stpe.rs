//! Spatiotemporal preference extractor: multi-head attention over the
//! behavior sequence, queried by the candidate item concatenated with the SAR.

use crate::error::{Error, Result};
use crate::nn::uniform;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    /// `[d_item + d_s, d_k]`
    pub query: ParamId,
    /// `[d_seq, d_k]`
    pub key: ParamId,
    /// `[d_seq, d_k]`
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub d_query: usize,
    pub d_seq: usize,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        d_query: usize,
        d_seq: usize,
        heads: usize,
        d_k: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || d_k == 0 {
            return Err(Error::Config("attention needs at least one head and d_k >= 1".into()));
        }
        let mut mat = |name: String, rows: usize| -> Result<ParamId> {
            let w = uniform::<T>(&[rows, d_k], 1.0 / (rows as f64).sqrt(), seed, &name);
            store.insert(&name, ParamKind::Dense, w)
        };
        let heads = (0..heads)
            .map(|h| {
                Ok(HeadParams {
                    query: mat(format!("stpe.head{h}.query"), d_query)?,
                    key: mat(format!("stpe.head{h}.key"), d_seq)?,
                    value: mat(format!("stpe.head{h}.value"), d_seq)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            d_query,
            d_seq,
            d_k,
        })
    }

    pub fn output_width(&self) -> usize {
        self.heads.len() * self.d_k
    }
}

#[derive(Debug, Clone)]
pub struct StpeOutput {
    /// `[B, H * d_k]`, heads concatenated.
    pub u: Var,
    /// Per head, the `[B, 1, T]` post-softmax weights.
    pub weights: Vec<Var>,
}

/// Batched attention. `item: [B, d_item]`, `sar: [B, d_s]` (joined to the
/// item in the query when given), `seq: [B, T, d_seq]`, `mask: B * T` flags
/// (true = real event). A row with no real events gets all-zero weights and
/// a zero output.
pub fn stpe_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    item: Var,
    sar: Option<Var>,
    seq: Var,
    mask: &[bool],
) -> Result<StpeOutput> {
    let shape = g.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != params.d_seq || mask.len() != shape[0] * shape[1] {
        return Err(Error::dim(
            "stpe_forward",
            format!(
                "sequence {shape:?} with mask of {} for d_seq {}",
                mask.len(),
                params.d_seq
            ),
        ));
    }
    let (b, t) = (shape[0], shape[1]);
    let q_in = match sar {
        Some(sar) => g.concat(&[item, sar], 1)?,
        None => item,
    };
    if g.shape(q_in)[1] != params.d_query {
        return Err(Error::dim(
            "stpe_forward",
            format!("query width {} but params expect {}", g.shape(q_in)[1], params.d_query),
        ));
    }
    let flat = g.reshape(seq, &[b * t, params.d_seq])?;
    let inv_sqrt = T::one() / T::from_usize_lossy(params.d_k).sqrt();
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let wq = g.param(store, head.query);
        let wk = g.param(store, head.key);
        let wv = g.param(store, head.value);
        let q = g.matmul(q_in, wq)?;
        let q = g.reshape(q, &[b, 1, params.d_k])?;
        let k = g.matmul(flat, wk)?;
        let k = g.reshape(k, &[b, t, params.d_k])?;
        let v = g.matmul(flat, wv)?;
        let v = g.reshape(v, &[b, t, params.d_k])?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let w = g.masked_softmax(scores, mask)?;
        let u = g.bmm(w, v, false)?;
        outs.push(g.reshape(u, &[b, params.d_k])?);
        weights.push(w);
    }
    let u = g.concat(&outs, 1)?;
    Ok(StpeOutput { u, weights })
}

/// Post-softmax weights of [`stpe_forward`] as a `[B, H, T]` tensor.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    item: Var,
    sar: Option<Var>,
    seq: Var,
    mask: &[bool],
) -> Result<Tensor<T>> {
    let out = stpe_forward(g, store, params, item, sar, seq, mask)?;
    let (b, t) = (g.shape(seq)[0], g.shape(seq)[1]);
    let h = out.weights.len();
    let mut data = vec![T::zero(); b * h * t];
    for (hi, &w) in out.weights.iter().enumerate() {
        let wv = g.value(w).data();
        for bi in 0..b {
            data[(bi * h + hi) * t..(bi * h + hi + 1) * t].copy_from_slice(&wv[bi * t..(bi + 1) * t]);
        }
    }
    Tensor::new(vec![b, h, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FD_STEP};

    struct Case {
        store: ParamStore<f64>,
        params: AttentionParams,
        item: Tensor<f64>,
        sar: Tensor<f64>,
        seq: Tensor<f64>,
    }

    fn case(b: usize, t: usize, heads: usize, d_k: usize, seed: u64) -> Case {
        let (d_item, d_s, d_seq) = (3, 2, 4);
        let mut store = ParamStore::new();
        let params = AttentionParams::build(&mut store, d_item + d_s, d_seq, heads, d_k, seed).unwrap();
        Case {
            store,
            params,
            item: uniform(&[b, d_item], 1.0, seed, "item"),
            sar: uniform(&[b, d_s], 1.0, seed, "sar"),
            seq: uniform(&[b, t, d_seq], 1.0, seed, "seq"),
        }
    }

    fn run(c: &Case, mask: &[bool]) -> (Vec<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let item = g.constant(c.item.clone());
        let sar = g.constant(c.sar.clone());
        let seq = g.constant(c.seq.clone());
        let out = stpe_forward(&mut g, &c.store, &c.params, item, Some(sar), seq, mask).unwrap();
        let u = g.value(out.u).data().to_vec();
        let mut g2 = Graph::new();
        let (item, sar, seq) = (
            g2.constant(c.item.clone()),
            g2.constant(c.sar.clone()),
            g2.constant(c.seq.clone()),
        );
        let w = attention_weights(&mut g2, &c.store, &c.params, item, Some(sar), seq, mask).unwrap();
        (u, w)
    }

    /// Straight-line evaluation of one sample: explicit loops, masked
    /// positions skipped rather than set to -inf.
    fn oracle(c: &Case, bi: usize, mask: &[bool]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t = c.seq.shape()[1];
        let d_seq = c.seq.shape()[2];
        let qin: Vec<f64> = c.item.row(bi).iter().chain(c.sar.row(bi)).copied().collect();
        let d_k = c.params.d_k;
        let proj = |x: &[f64], w: &[f64]| -> Vec<f64> {
            (0..d_k)
                .map(|k| x.iter().enumerate().map(|(i, v)| v * w[i * d_k + k]).sum())
                .collect()
        };
        let mut u = Vec::new();
        let mut all_w = Vec::new();
        for head in &c.params.heads {
            let q = proj(&qin, c.store.value(head.query).data());
            let mut scores = vec![None; t];
            let mut values = vec![vec![0.0; d_k]; t];
            for p in 0..t {
                if !mask[bi * t + p] {
                    continue;
                }
                let e = &c.seq.data()[(bi * t + p) * d_seq..(bi * t + p + 1) * d_seq];
                let k = proj(e, c.store.value(head.key).data());
                values[p] = proj(e, c.store.value(head.value).data());
                scores[p] = Some(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d_k as f64).sqrt());
            }
            let z: f64 = scores.iter().flatten().map(|s| s.exp()).sum();
            let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| s.exp() / z)).collect();
            for k in 0..d_k {
                u.push((0..t).map(|p| w[p] * values[p][k]).sum());
            }
            all_w.push(w);
        }
        (u, all_w)
    }

    #[test]
    fn matches_straight_line_oracle() {
        let c = case(2, 3, 2, 3, 4);
        let mask = [true, false, true, true, true, true];
        let (u, w) = run(&c, &mask);
        for bi in 0..2 {
            let (ou, ow) = oracle(&c, bi, &mask);
            for (a, b) in u[bi * 6..(bi + 1) * 6].iter().zip(&ou) {
                assert!((a - b).abs() < 1e-12);
            }
            for h in 0..2 {
                for p in 0..3 {
                    assert!((w.data()[(bi * 2 + h) * 3 + p] - ow[h][p]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(w.data()[1], 0.0);
    }

    #[test]
    fn single_key_gets_full_weight() {
        let c = case(1, 1, 1, 3, 2);
        let (u, w) = run(&c, &[true]);
        assert_eq!(w.data(), &[1.0]);
        let vw = c.store.value(c.params.heads[0].value).data();
        for k in 0..3 {
            let expect: f64 = (0..4).map(|i| c.seq.data()[i] * vw[i * 3 + k]).sum();
            assert!((u[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_events_split_evenly() {
        let mut c = case(1, 4, 2, 3, 6);
        let first: Vec<f64> = c.seq.data()[..4].to_vec();
        c.seq.data_mut()[4..8].copy_from_slice(&first);
        let (_, w) = run(&c, &[true, true, false, false]);
        for h in 0..2 {
            assert!((w.data()[h * 4] - 0.5).abs() < 1e-15);
            assert!((w.data()[h * 4 + 1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn all_masked_gives_zeros() {
        let c = case(1, 3, 2, 2, 1);
        let (u, w) = run(&c, &[false; 3]);
        assert!(u.iter().all(|&v| v == 0.0));
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_mask_length_is_dimension_error() {
        let c = case(1, 3, 1, 2, 1);
        let mut g = Graph::new();
        let (item, sar, seq) = (
            g.constant(c.item.clone()),
            g.constant(c.sar.clone()),
            g.constant(c.seq.clone()),
        );
        assert!(matches!(
            stpe_forward(&mut g, &c.store, &c.params, item, Some(sar), seq, &[true; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = case(2, 4, 2, 3, 8);
        let mut store = c.store.clone();
        let seq_id = store.insert("seq", ParamKind::Dense, c.seq.clone()).unwrap();
        let item_id = store.insert("item", ParamKind::Dense, c.item.clone()).unwrap();
        let sar_id = store.insert("sar", ParamKind::Dense, c.sar.clone()).unwrap();
        let mask = [true, true, false, true, true, false, false, true];
        let report = check_params(&store, FD_STEP, usize::MAX, 0, |g, st| {
            let (item, sar, seq) = (g.param(st, item_id), g.param(st, sar_id), g.param(st, seq_id));
            let out = stpe_forward(g, st, &c.params, item, Some(sar), seq, &mask)?;
            let sq = g.mul(out.u, out.u)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn masked_rows_get_no_gradient() {
        let c = case(1, 3, 2, 3, 8);
        let mut g = Graph::new();
        let item = g.constant(c.item.clone());
        let sar = g.constant(c.sar.clone());
        let seq = g.variable(c.seq.clone());
        let out = stpe_forward(&mut g, &c.store, &c.params, item, Some(sar), seq, &[true, false, true]).unwrap();
        let l = g.sum(out.u).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(seq).unwrap();
        assert!(grad[4..8].iter().all(|&v| v == 0.0));
        assert!(grad[..4].iter().any(|&v| v != 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn permuting_events_permutes_weights(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(), n_real in 1usize..=5) {
                let c = case(1, 5, 2, 3, seed);
                let mask: Vec<bool> = (0..5).map(|p| p < n_real).collect();
                let (u, w) = run(&c, &mask);
                let mut pc = case(1, 5, 2, 3, seed);
                let mut pmask = vec![false; 5];
                for (dst, &src) in perm.iter().enumerate() {
                    pc.seq.data_mut()[dst * 4..dst * 4 + 4].copy_from_slice(&c.seq.data()[src * 4..src * 4 + 4]);
                    pmask[dst] = mask[src];
                }
                let (pu, pw) = run(&pc, &pmask);
                for (a, b) in u.iter().zip(&pu) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                for h in 0..2 {
                    for (dst, &src) in perm.iter().enumerate() {
                        prop_assert!((pw.data()[h * 5 + dst] - w.data()[h * 5 + src]).abs() < 1e-12);
                    }
                    let total: f64 = w.data()[h * 5..h * 5 + 5].iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

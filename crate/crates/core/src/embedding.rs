//! Per-field embedding tables and the batched field front end.
//!
//! Item, category, cell and time-bucket tables are shared between the
//! candidate/search fields and the behavior-sequence events, since both
//! index the same vocabularies. Time buckets are stored at `bucket + 1` so
//! that id 0 stays the padding row.

use crate::data::{truncate_and_pad, Sample, Vocab, CONTEXT_FEATURES, TIME_BUCKETS, USER_FEATURES};
use crate::error::Result;
use crate::nn::init_embedding;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Var};

/// Attributes concatenated per behavior event: item, category, cell, time.
pub const EVENT_ATTRS: usize = 4;
/// Attributes concatenated for the candidate item.
pub const ITEM_ATTRS: usize = 5;
/// Search-state fields: query, location, time.
pub const SEARCH_FIELDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub dim: usize,
    pub item: ParamId,
    pub category: ParamId,
    pub shop: ParamId,
    pub price_band: ParamId,
    pub subsidy: ParamId,
    pub query_token: ParamId,
    pub cell: ParamId,
    pub time_bucket: ParamId,
    pub user: Vec<ParamId>,
    pub context: Vec<ParamId>,
}

impl EmbeddingTables {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, vocab: &Vocab, dim: usize, seed: u64) -> Result<Self> {
        let mut table = |name: &str, size: usize| -> Result<ParamId> {
            let name = format!("emb.{name}");
            store.insert(&name, ParamKind::Embedding, init_embedding(size, dim, seed, &name))
        };
        Ok(Self {
            dim,
            item: table("item_id", vocab.items)?,
            category: table("category", vocab.categories)?,
            shop: table("shop_id", vocab.shops)?,
            price_band: table("price_band", vocab.price_bands)?,
            subsidy: table("subsidy_flag", vocab.subsidy_flags)?,
            query_token: table("query_token", vocab.query_tokens)?,
            cell: table("geohash_cell", vocab.cells)?,
            time_bucket: table("time_bucket", TIME_BUCKETS + 1)?,
            user: USER_FEATURES
                .iter()
                .zip(&vocab.user_feats)
                .map(|(n, &v)| table(&format!("user.{n}"), v))
                .collect::<Result<_>>()?,
            context: CONTEXT_FEATURES
                .iter()
                .zip(&vocab.context_feats)
                .map(|(n, &v)| table(&format!("context.{n}"), v))
                .collect::<Result<_>>()?,
        })
    }
}

/// Embedded fields of a batch of `B` samples.
#[derive(Debug, Clone)]
pub struct FieldEmbeddings {
    /// `[B, T, 4d]`: item, category, cell and time embeddings per event.
    pub seq: Var,
    /// `B * T` flags, true at real (unpadded) events.
    pub seq_mask: Vec<bool>,
    /// `[B, 5d]`
    pub item: Var,
    /// `[B, d]`, mean of the query token embeddings.
    pub query: Var,
    pub location: Var,
    pub time: Var,
    /// One `[B, d]` tensor per user feature.
    pub user: Vec<Var>,
    /// One `[B, d]` tensor per context feature.
    pub context: Vec<Var>,
}

pub fn embed_batch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    batch: &[&Sample],
    max_seq_len: usize,
) -> Result<FieldEmbeddings> {
    let b = batch.len();
    let d = tables.dim;
    let t = max_seq_len;

    let mut ev = [
        Vec::with_capacity(b * t),
        Vec::with_capacity(b * t),
        Vec::with_capacity(b * t),
        Vec::with_capacity(b * t),
    ];
    let mut seq_mask = Vec::with_capacity(b * t);
    for s in batch {
        let (events, mask) = truncate_and_pad(&s.behavior_seq, t);
        for (e, &real) in events.iter().zip(&mask) {
            let ids = if real {
                [e.item_id, e.category, e.geohash_cell, e.time_bucket + 1]
            } else {
                [0; EVENT_ATTRS]
            };
            for (col, id) in ev.iter_mut().zip(ids) {
                col.push(id);
            }
        }
        seq_mask.extend(mask);
    }
    let seq_tables = [tables.item, tables.category, tables.cell, tables.time_bucket];
    let mut parts = Vec::with_capacity(EVENT_ATTRS);
    for (table, ids) in seq_tables.into_iter().zip(&ev) {
        parts.push(g.lookup(store, table, ids)?);
    }
    let seq2d = g.concat(&parts, 1)?;
    let seq = g.reshape(seq2d, &[b, t, EVENT_ATTRS * d])?;

    let item_tables = [
        tables.item,
        tables.category,
        tables.shop,
        tables.price_band,
        tables.subsidy,
    ];
    let mut parts = Vec::with_capacity(ITEM_ATTRS);
    for (k, table) in item_tables.into_iter().enumerate() {
        let ids: Vec<usize> = batch.iter().map(|s| s.candidate_item.ids()[k]).collect();
        parts.push(g.lookup(store, table, &ids)?);
    }
    let item = g.concat(&parts, 1)?;

    let bags: Vec<Vec<usize>> = batch.iter().map(|s| s.query_tokens.clone()).collect();
    let query = g.lookup_bag_mean(store, tables.query_token, &bags)?;
    let cells: Vec<usize> = batch.iter().map(|s| s.geohash_cell).collect();
    let location = g.lookup(store, tables.cell, &cells)?;
    let buckets: Vec<usize> = batch.iter().map(|s| s.time_bucket + 1).collect();
    let time = g.lookup(store, tables.time_bucket, &buckets)?;

    let mut user = Vec::with_capacity(tables.user.len());
    for (j, &table) in tables.user.iter().enumerate() {
        let ids: Vec<usize> = batch.iter().map(|s| s.user_feats[j]).collect();
        user.push(g.lookup(store, table, &ids)?);
    }
    let mut context = Vec::with_capacity(tables.context.len());
    for (j, &table) in tables.context.iter().enumerate() {
        let ids: Vec<usize> = batch.iter().map(|s| s.context_feats[j]).collect();
        context.push(g.lookup(store, table, &ids)?);
    }

    Ok(FieldEmbeddings {
        seq,
        seq_mask,
        item,
        query,
        location,
        time,
        user,
        context,
    })
}

/// Single-sample form of [`embed_batch`] (every tensor has leading dimension 1).
pub fn embed_sample<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    sample: &Sample,
    max_seq_len: usize,
) -> Result<FieldEmbeddings> {
    embed_batch(g, store, tables, &[sample], max_seq_len)
}

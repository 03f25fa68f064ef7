use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per time bucket; the day is split into 48 half-hour buckets.
pub const BUCKET_SECONDS: i64 = 1800;
pub const TIME_BUCKETS: usize = 48;

/// Names of the user-field features, in `Sample::user_feats` order.
pub const USER_FEATURES: [&str; 3] = ["user_id", "age_band", "vip_level"];
/// Names of the context-field features, in `Sample::context_feats` order.
pub const CONTEXT_FEATURES: [&str; 3] = ["red_packet", "weather", "platform"];

pub fn seconds_of_day(timestamp: i64) -> i64 {
    timestamp.rem_euclid(86_400)
}

pub fn time_bucket_of(timestamp: i64) -> usize {
    (seconds_of_day(timestamp) / BUCKET_SECONDS) as usize
}

/// One past purchase in a user's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorEvent {
    pub item_id: usize,
    pub category: usize,
    pub geohash_cell: usize,
    pub time_bucket: usize,
    pub timestamp: i64,
}

impl BehaviorEvent {
    /// Padding event: every id is the reserved 0.
    pub fn padding() -> Self {
        Self {
            item_id: 0,
            category: 0,
            geohash_cell: 0,
            time_bucket: 0,
            timestamp: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemFeatures {
    pub item_id: usize,
    pub category: usize,
    pub shop_id: usize,
    pub price_band: usize,
    pub subsidy_flag: usize,
}

impl ItemFeatures {
    pub fn ids(&self) -> [usize; 5] {
        [
            self.item_id,
            self.category,
            self.shop_id,
            self.price_band,
            self.subsidy_flag,
        ]
    }
}

/// One impression with its seven feature fields and click label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub user_id: usize,
    pub query_tokens: Vec<usize>,
    pub geohash_cell: usize,
    pub time_bucket: usize,
    pub timestamp: i64,
    pub behavior_seq: Vec<BehaviorEvent>,
    pub candidate_item: ItemFeatures,
    pub user_feats: Vec<usize>,
    pub context_feats: Vec<usize>,
    pub label: u8,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

impl Sample {
    /// Structural invariants that hold independently of any vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(invalid("label", format!("must be 0 or 1, got {}", self.label)));
        }
        if self.query_tokens.is_empty() {
            return Err(invalid("query_tokens", "at least one token is required"));
        }
        if self.time_bucket != time_bucket_of(self.timestamp) {
            return Err(invalid(
                "time_bucket",
                format!(
                    "{} does not match timestamp {} (bucket {})",
                    self.time_bucket,
                    self.timestamp,
                    time_bucket_of(self.timestamp)
                ),
            ));
        }
        if self.user_feats.len() != USER_FEATURES.len() {
            return Err(invalid(
                "user_feats",
                format!(
                    "expected {} features, got {}",
                    USER_FEATURES.len(),
                    self.user_feats.len()
                ),
            ));
        }
        if self.context_feats.len() != CONTEXT_FEATURES.len() {
            return Err(invalid(
                "context_feats",
                format!(
                    "expected {} features, got {}",
                    CONTEXT_FEATURES.len(),
                    self.context_feats.len()
                ),
            ));
        }
        let mut prev = i64::MIN;
        for e in &self.behavior_seq {
            if e.timestamp < prev {
                return Err(invalid("behavior_seq", "events must be timestamp-ascending"));
            }
            if e.timestamp >= self.timestamp {
                return Err(invalid(
                    "behavior_seq",
                    "events must be strictly earlier than the sample timestamp",
                ));
            }
            if e.time_bucket != time_bucket_of(e.timestamp) {
                return Err(invalid("behavior_seq.time_bucket", "does not match event timestamp"));
            }
            prev = e.timestamp;
        }
        Ok(())
    }

    /// Checks every categorical id against the vocabulary sizes.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let check = |field: &str, id: usize, size: usize| -> Result<()> {
            if id >= size {
                Err(invalid(field, format!("id {id} exceeds vocabulary size {size}")))
            } else {
                Ok(())
            }
        };
        check("user_id", self.user_id, vocab.users)?;
        for &t in &self.query_tokens {
            check("query_tokens", t, vocab.query_tokens)?;
        }
        check("geohash_cell", self.geohash_cell, vocab.cells)?;
        check("time_bucket", self.time_bucket, TIME_BUCKETS)?;
        let item = &self.candidate_item;
        check("candidate_item.item_id", item.item_id, vocab.items)?;
        check("candidate_item.category", item.category, vocab.categories)?;
        check("candidate_item.shop_id", item.shop_id, vocab.shops)?;
        check("candidate_item.price_band", item.price_band, vocab.price_bands)?;
        check("candidate_item.subsidy_flag", item.subsidy_flag, vocab.subsidy_flags)?;
        for e in &self.behavior_seq {
            check("behavior_seq.item_id", e.item_id, vocab.items)?;
            check("behavior_seq.category", e.category, vocab.categories)?;
            check("behavior_seq.geohash_cell", e.geohash_cell, vocab.cells)?;
        }
        for (j, (&id, &size)) in self.user_feats.iter().zip(&vocab.user_feats).enumerate() {
            check(USER_FEATURES[j], id, size)?;
        }
        for (j, (&id, &size)) in self.context_feats.iter().zip(&vocab.context_feats).enumerate() {
            check(CONTEXT_FEATURES[j], id, size)?;
        }
        Ok(())
    }
}

/// Vocabulary sizes per field. Each size counts the reserved id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub shops: usize,
    pub price_bands: usize,
    pub subsidy_flags: usize,
    pub cells: usize,
    pub query_tokens: usize,
    pub user_feats: Vec<usize>,
    pub context_feats: Vec<usize>,
}

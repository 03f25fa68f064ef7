//! Sample schema, synthetic data generation, and JSONL ingestion.

mod generator;
mod jsonl;
mod schema;
mod sequence;

pub use generator::{generate, period_of, region_of, GeneratorConfig, GroundTruth, REGIONS};
pub use jsonl::{load_jsonl, save_jsonl};
pub use schema::{
    seconds_of_day, time_bucket_of, BehaviorEvent, ItemFeatures, Sample, Vocab, BUCKET_SECONDS, CONTEXT_FEATURES,
    TIME_BUCKETS, USER_FEATURES,
};
pub use sequence::truncate_and_pad;

use std::path::Path;

use crate::error::{Error, Result};

/// Writes the ground-truth sidecar as JSON.
pub fn save_ground_truth(truth: &GroundTruth, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(f), truth)?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[cfg(test)]
pub(crate) fn schema_fixture() -> Sample {
    Sample {
        user_id: 1,
        query_tokens: vec![2],
        geohash_cell: 3,
        time_bucket: 24,
        timestamp: 12 * 3600,
        behavior_seq: vec![],
        candidate_item: ItemFeatures {
            item_id: 5,
            category: 1,
            shop_id: 1,
            price_band: 1,
            subsidy_flag: 1,
        },
        user_feats: vec![1, 1, 1],
        context_feats: vec![1, 1, 1],
        label: 1,
    }
}

/// Splits off the last `test_fraction` of `samples` (rounded) as a
/// held-out set. Generation order is already random, so no shuffle is
/// applied.
pub fn split_holdout(samples: &[Sample], test_fraction: f64) -> (&[Sample], &[Sample]) {
    let n_test = ((samples.len() as f64) * test_fraction).round() as usize;
    samples.split_at(samples.len() - n_test.min(samples.len()))
}

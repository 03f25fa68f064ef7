//! Deterministic synthetic impressions with a planted spatiotemporal signal.
//!
//! Every user has a latent affinity tensor over (region, time period,
//! category). The click logit of an impression is
//!
//! ```text
//! base + signal * sharpness * A_u[region, period, category]
//!      + signal * context_strength * red_packet * B[region, period]
//!      + taste_strength * <p_u, q_item>
//! ```
//!
//! where `B` is a global ±1 table, so the red-packet context feature only
//! carries information through its interaction with location and time.
//! Behavior sequences are drawn from the user's own high-affinity cells,
//! which is what lets an attention module recover `A_u` from history.
//! `base` is bisected so the expected positive rate hits the target.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schema::{time_bucket_of, BehaviorEvent, ItemFeatures, Sample, Vocab, BUCKET_SECONDS, TIME_BUCKETS};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// 2023-01-01T00:00:00Z; sample timestamps start `history_days` after this.
const EPOCH: i64 = 1_672_531_200;
const DAY: i64 = 86_400;
const MAX_VOCAB: usize = 1 << 24;
const AGE_BANDS: usize = 5;
const VIP_LEVELS: usize = 3;
const WEATHER: usize = 4;
const PRICE_BANDS: usize = 5;
const TASTE_DIM: usize = 4;
/// Spatial regions are the four quadrants of the cell grid.
pub const REGIONS: usize = 4;

/// Meal-time peaks of search activity: (hour of day, std-dev in hours, weight).
const PEAKS: [(f64, f64, f64); 4] = [(8.0, 1.0, 0.2), (12.0, 1.0, 0.35), (18.5, 1.25, 0.3), (22.0, 1.0, 0.15)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Cells form a `grid_size x grid_size` grid.
    pub grid_size: usize,
    pub n_time_buckets: usize,
    pub samples: usize,
    /// Inclusive range of behavior sequence lengths.
    pub seq_len_range: [usize; 2],
    pub preference_sharpness: f64,
    pub spatiotemporal_signal: f64,
    pub seed: u64,
    /// Time periods the 48 buckets are grouped into for the affinity tensor.
    pub n_time_periods: usize,
    pub tokens_per_category: usize,
    /// Inverse temperature of behavior-sequence sampling over affinity cells.
    pub sequence_focus: f64,
    /// Fraction of each affinity cell's variance shared by all users.
    pub shared_affinity: f64,
    pub context_strength: f64,
    pub taste_strength: f64,
    pub target_positive_rate: f64,
    /// Days spanned by sample timestamps.
    pub n_days: usize,
    /// Days of history behind each sample.
    pub history_days: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 1000,
            n_categories: 6,
            grid_size: 8,
            n_time_buckets: TIME_BUCKETS,
            samples: 100_000,
            seq_len_range: [5, 20],
            preference_sharpness: 4.0,
            spatiotemporal_signal: 1.0,
            seed: 7,
            n_time_periods: 4,
            tokens_per_category: 3,
            sequence_focus: 1.5,
            shared_affinity: 0.6,
            context_strength: 1.0,
            taste_strength: 0.3,
            target_positive_rate: 0.12,
            n_days: 1,
            history_days: 30,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.n_time_buckets != TIME_BUCKETS {
            return fail(format!("n_time_buckets must be {TIME_BUCKETS}"));
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_categories == 0 || self.samples == 0 {
            return fail("n_users, n_items, n_categories and samples must be positive".into());
        }
        if self.n_items < self.n_categories {
            return fail("every category needs at least one item (n_items >= n_categories)".into());
        }
        if self.grid_size < 2 {
            return fail("grid_size must be at least 2".into());
        }
        if self.n_time_periods == 0 || TIME_BUCKETS % self.n_time_periods != 0 {
            return fail(format!("n_time_periods must divide {TIME_BUCKETS}"));
        }
        if self.tokens_per_category == 0 {
            return fail("tokens_per_category must be positive".into());
        }
        if self.seq_len_range[0] > self.seq_len_range[1] {
            return fail("seq_len_range must be [min, max] with min <= max".into());
        }
        if !(self.preference_sharpness > 0.0) {
            return fail("preference_sharpness must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.spatiotemporal_signal) {
            return fail("spatiotemporal_signal must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.shared_affinity) {
            return fail("shared_affinity must lie in [0, 1]".into());
        }
        if !(0.0 < self.target_positive_rate && self.target_positive_rate < 1.0) {
            return fail("target_positive_rate must lie in (0, 1)".into());
        }
        if self.n_days == 0 || self.history_days == 0 {
            return fail("n_days and history_days must be positive".into());
        }
        let largest = [
            self.n_users,
            self.n_items,
            self.grid_size * self.grid_size,
            self.n_categories * self.tokens_per_category,
        ];
        if largest.iter().any(|&v| v >= MAX_VOCAB) {
            return fail(format!("vocabulary overflow: ids must stay below {MAX_VOCAB}"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn n_shops(&self) -> usize {
        (self.n_items / 10).max(1)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            users: self.n_users + 1,
            items: self.n_items + 1,
            categories: self.n_categories + 1,
            shops: self.n_shops() + 1,
            price_bands: PRICE_BANDS + 1,
            subsidy_flags: 3,
            cells: self.n_cells() + 1,
            query_tokens: self.n_categories * self.tokens_per_category + 1,
            user_feats: vec![self.n_users + 1, AGE_BANDS + 1, VIP_LEVELS + 1],
            context_feats: vec![3, WEATHER + 1, 2],
        }
    }
}

/// Generative parameters, written as a sidecar so that tests can score
/// samples with the true logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub base_logit: f64,
    pub spatiotemporal_signal: f64,
    pub preference_sharpness: f64,
    pub context_strength: f64,
    pub taste_strength: f64,
    pub grid_size: usize,
    pub n_time_periods: usize,
    pub n_categories: usize,
    /// Per user (index `user_id - 1`), flattened `[region][period][category]`.
    pub affinity: Vec<Vec<f64>>,
    /// Flattened `[region][period]`, entries ±1.
    pub context_effect: Vec<f64>,
    pub user_taste: Vec<Vec<f64>>,
    /// Per item (index `item_id - 1`).
    pub item_taste: Vec<Vec<f64>>,
}

pub fn region_of(cell: usize, grid_size: usize) -> usize {
    let c = cell.saturating_sub(1);
    let (row, col) = (c / grid_size, c % grid_size);
    usize::from(row >= grid_size / 2) * 2 + usize::from(col >= grid_size / 2)
}

pub fn period_of(bucket: usize, n_periods: usize) -> usize {
    bucket / (TIME_BUCKETS / n_periods)
}

impl GroundTruth {
    fn cell_index(&self, region: usize, period: usize, category: usize) -> usize {
        (region * self.n_time_periods + period) * self.n_categories + (category - 1)
    }

    /// Affinity of a user for the sample's search cell and candidate category.
    pub fn affinity_of(&self, s: &Sample) -> f64 {
        let r = region_of(s.geohash_cell, self.grid_size);
        let p = period_of(s.time_bucket, self.n_time_periods);
        self.affinity[s.user_id - 1][self.cell_index(r, p, s.candidate_item.category)]
    }

    fn offset(&self, s: &Sample) -> f64 {
        let r = region_of(s.geohash_cell, self.grid_size);
        let p = period_of(s.time_bucket, self.n_time_periods);
        let red_packet = if s.context_feats[0] == 2 { 1.0 } else { 0.0 };
        let taste: f64 = self.user_taste[s.user_id - 1]
            .iter()
            .zip(&self.item_taste[s.candidate_item.item_id - 1])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (TASTE_DIM as f64).sqrt();
        self.spatiotemporal_signal
            * (self.preference_sharpness * self.affinity_of(s)
                + self.context_strength * red_packet * self.context_effect[r * self.n_time_periods + p])
            + self.taste_strength * taste
    }

    /// True click logit of a generated sample (the Bayes-optimal score).
    pub fn logit(&self, s: &Sample) -> f64 {
        self.base_logit + self.offset(s)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_seconds_of_day(rng: &mut ChaCha8Rng, peaks: &WeightedIndex<f64>) -> i64 {
    let (hour, sd, _) = PEAKS[peaks.sample(rng)];
    let secs = (hour + sd * normal(rng)) * 3600.0;
    (secs as i64).rem_euclid(DAY)
}

struct World {
    items: Vec<ItemFeatures>,
    by_category: Vec<Vec<usize>>,
    user_static: Vec<[usize; 2]>,
    seq_sampler: Vec<WeightedIndex<f64>>,
}

/// Generates `config.samples` impressions and their ground truth.
/// Identical configs give identical output.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<Sample>, GroundTruth)> {
    config.validate()?;
    let mut rng = seeded(config.seed, "generator");
    let (cats, periods, grid) = (config.n_categories, config.n_time_periods, config.grid_size);
    let cells_per_user = REGIONS * periods * cats;

    // Items: categories assigned round-robin so every category is populated.
    let mut items = Vec::with_capacity(config.n_items);
    let mut by_category = vec![Vec::new(); cats + 1];
    for i in 1..=config.n_items {
        let category = 1 + (i - 1) % cats;
        by_category[category].push(items.len());
        items.push(ItemFeatures {
            item_id: i,
            category,
            shop_id: rng.gen_range(1..=config.n_shops()),
            price_band: rng.gen_range(1..=PRICE_BANDS),
            subsidy_flag: rng.gen_range(1..=2),
        });
    }

    // Users: affinity = sqrt(rho) * shared + sqrt(1 - rho) * own, where the
    // user's own part is (location-time + category + interaction) / sqrt(3);
    // every cell has unit variance.
    let shared: Vec<f64> = (0..cells_per_user).map(|_| normal(&mut rng)).collect();
    let (w_shared, w_own) = (config.shared_affinity.sqrt(), (1.0 - config.shared_affinity).sqrt());
    let mut affinity = Vec::with_capacity(config.n_users);
    let mut user_static = Vec::with_capacity(config.n_users);
    let mut seq_sampler = Vec::with_capacity(config.n_users);
    for _ in 0..config.n_users {
        let loc_time: Vec<f64> = (0..REGIONS * periods).map(|_| normal(&mut rng)).collect();
        let taste_cat: Vec<f64> = (0..cats).map(|_| normal(&mut rng)).collect();
        let a: Vec<f64> = (0..cells_per_user)
            .map(|k| {
                let (rp, c) = (k / cats, k % cats);
                let own = (loc_time[rp] + taste_cat[c] + normal(&mut rng)) / 3f64.sqrt();
                w_shared * shared[k] + w_own * own
            })
            .collect();
        let weights: Vec<f64> = a.iter().map(|v| (config.sequence_focus * v).exp()).collect();
        seq_sampler.push(WeightedIndex::new(&weights).expect("positive weights"));
        user_static.push([rng.gen_range(1..=AGE_BANDS), rng.gen_range(1..=VIP_LEVELS)]);
        affinity.push(a);
    }
    let context_effect: Vec<f64> = (0..REGIONS * periods)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let user_taste: Vec<Vec<f64>> = (0..config.n_users)
        .map(|_| (0..TASTE_DIM).map(|_| normal(&mut rng)).collect())
        .collect();
    let item_taste: Vec<Vec<f64>> = (0..config.n_items)
        .map(|_| (0..TASTE_DIM).map(|_| normal(&mut rng)).collect())
        .collect();

    let world = World {
        items,
        by_category,
        user_static,
        seq_sampler,
    };
    let peaks = WeightedIndex::new(PEAKS.iter().map(|p| p.2)).expect("peak weights");
    let samples: Vec<Sample> = (0..config.samples)
        .map(|_| draw_sample(config, &world, &peaks, &mut rng))
        .collect();

    let mut truth = GroundTruth {
        base_logit: 0.0,
        spatiotemporal_signal: config.spatiotemporal_signal,
        preference_sharpness: config.preference_sharpness,
        context_strength: config.context_strength,
        taste_strength: config.taste_strength,
        grid_size: grid,
        n_time_periods: periods,
        n_categories: cats,
        affinity,
        context_effect,
        user_taste,
        item_taste,
    };
    let offsets: Vec<f64> = samples.iter().map(|s| truth.offset(s)).collect();
    truth.base_logit = tune_base_logit(&offsets, config.target_positive_rate);

    let mut samples = samples;
    for (s, off) in samples.iter_mut().zip(&offsets) {
        s.label = u8::from(rng.gen_bool(sigmoid(truth.base_logit + off)));
    }
    Ok((samples, truth))
}

/// Bisects the intercept so that the mean click probability equals `target`.
fn tune_base_logit(offsets: &[f64], target: f64) -> f64 {
    let rate = |b: f64| offsets.iter().map(|o| sigmoid(b + o)).sum::<f64>() / offsets.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_sample(config: &GeneratorConfig, world: &World, peaks: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Sample {
    let (cats, periods, grid) = (config.n_categories, config.n_time_periods, config.grid_size);
    let user = rng.gen_range(1..=config.n_users);
    let day = rng.gen_range(0..config.n_days) as i64;
    let day_start = EPOCH + (config.history_days as i64 + day) * DAY;
    let timestamp = day_start + sample_seconds_of_day(rng, peaks);
    let cell = rng.gen_range(1..=grid * grid);

    let intent = rng.gen_range(1..=cats);
    let n_tokens = rng.gen_range(1..=config.tokens_per_category.min(2));
    let mut query_tokens: Vec<usize> = rand::seq::index::sample(rng, config.tokens_per_category, n_tokens)
        .into_iter()
        .map(|j| 1 + (intent - 1) * config.tokens_per_category + j)
        .collect();
    query_tokens.sort_unstable();

    // Recall returns an item of the searched category most of the time.
    let item = if rng.gen_bool(0.8) {
        let pool = &world.by_category[intent];
        world.items[pool[rng.gen_range(0..pool.len())]].clone()
    } else {
        world.items[rng.gen_range(0..world.items.len())].clone()
    };

    let len = rng.gen_range(config.seq_len_range[0]..=config.seq_len_range[1]);
    let buckets_per_period = TIME_BUCKETS / periods;
    let half = grid / 2;
    let mut behavior_seq: Vec<BehaviorEvent> = (0..len)
        .map(|_| {
            let k = world.seq_sampler[user - 1].sample(rng);
            let (rp, c) = (k / cats, k % cats + 1);
            let (region, period) = (rp / periods, rp % periods);
            let row = (region / 2) * half + rng.gen_range(0..if region / 2 == 0 { half } else { grid - half });
            let col = (region % 2) * half + rng.gen_range(0..if region % 2 == 0 { half } else { grid - half });
            let bucket = period * buckets_per_period + rng.gen_range(0..buckets_per_period);
            let days_back = rng.gen_range(1..=config.history_days) as i64;
            let ts = day_start - days_back * DAY + bucket as i64 * BUCKET_SECONDS + rng.gen_range(0..BUCKET_SECONDS);
            let pool = &world.by_category[c];
            BehaviorEvent {
                item_id: world.items[pool[rng.gen_range(0..pool.len())]].item_id,
                category: c,
                geohash_cell: 1 + row * grid + col,
                time_bucket: time_bucket_of(ts),
                timestamp: ts,
            }
        })
        .collect();
    behavior_seq.sort_by_key(|e| e.timestamp);

    let [age, vip] = world.user_static[user - 1];
    let red_packet = if rng.gen_bool(0.3) { 2 } else { 1 };
    Sample {
        user_id: user,
        query_tokens,
        geohash_cell: cell,
        time_bucket: time_bucket_of(timestamp),
        timestamp,
        behavior_seq,
        candidate_item: item,
        user_feats: vec![user, age, vip],
        context_feats: vec![red_packet, rng.gen_range(1..=WEATHER), 1],
        label: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_users: 50,
            n_items: 60,
            samples: 2000,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let other = GeneratorConfig { seed: 8, ..small() };
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn samples_are_valid_and_within_vocab() {
        let cfg = small();
        let vocab = cfg.vocab();
        let (samples, _) = generate(&cfg).unwrap();
        for s in &samples {
            s.validate().unwrap();
            s.check_vocab(&vocab).unwrap();
        }
    }

    #[test]
    fn positive_rate_lands_in_band() {
        for signal in [0.0, 0.5, 1.0] {
            let cfg = GeneratorConfig {
                spatiotemporal_signal: signal,
                ..small()
            };
            let (samples, _) = generate(&cfg).unwrap();
            let rate = samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len() as f64;
            assert!((0.05..=0.25).contains(&rate), "signal {signal}: rate {rate}");
        }
    }

    #[test]
    fn regions_are_quadrants() {
        // 4x4 grid: cells 1..=16 row-major.
        assert_eq!(region_of(1, 4), 0);
        assert_eq!(region_of(4, 4), 1);
        assert_eq!(region_of(13, 4), 2);
        assert_eq!(region_of(16, 4), 3);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = GeneratorConfig {
            n_time_buckets: 24,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            n_users: MAX_VOCAB,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("overflow")));
    }
}

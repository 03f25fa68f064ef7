//! Trains every (ablation row, seed) pair on a fixed split and reports test
//! AUC, with a CSV writer/reader and a mean/std summary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, Precision};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{AblationSwitches, Cspm, ModelSpec};
use crate::tensor::Scalar;
use crate::trainer::Trainer;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config: String,
    pub mean_auc: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_auc: f64,
    pub runs: usize,
}

/// Trains one model of the named variant with `seed` (used for both the
/// initialization and the data order) and evaluates it on `test`.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    variant: &str,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
) -> Result<AblationRow> {
    match cfg.train.precision {
        Precision::F32 => run::<f32>(cfg, variant, seed, train, test),
        Precision::F64 => run::<f64>(cfg, variant, seed, train, test),
    }
}

fn run<T: Scalar>(
    cfg: &ExperimentConfig,
    variant: &str,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
) -> Result<AblationRow> {
    let start = Instant::now();
    let switches = AblationSwitches::from_name(variant)?;
    let model = Cspm::<T>::new(ModelSpec::from_config(cfg), switches, seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), seed);
    trainer.eval_batch_size = cfg.eval.batch_size;
    trainer.train(train, None, |_| Ok(()))?;
    let result = trainer.evaluate(test)?;
    Ok(AblationRow {
        config: variant.to_string(),
        seed,
        auc: result.auc,
        logloss: result.logloss,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the grid in `(config, seed)` order. Every variant sees the same
/// data order for a given seed. With `parallel`, cells run on the rayon
/// pool; results are identical either way.
pub fn run_ablation_grid(
    cfg: &ExperimentConfig,
    train: &[Sample],
    test: &[Sample],
    configs: &[String],
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    for name in configs {
        AblationSwitches::from_name(name)?;
    }
    let jobs: Vec<(&String, u64)> = configs
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let one = |&(c, s): &(&String, u64)| train_and_evaluate(cfg, c, s, train, test);
    if parallel {
        jobs.par_iter().map(one).collect()
    } else {
        jobs.iter().map(one).collect()
    }
}

pub const RESULTS_HEADER: &str = "config,seed,auc,logloss,wall_seconds";

fn row_line(r: &AblationRow) -> String {
    format!(
        "{},{},{},{},{:.3}\n",
        r.config, r.seed, r.auc, r.logloss, r.wall_seconds
    )
}

pub fn read_results_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: format!("{m}: '{line}'"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(AblationRow {
            config: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("bad seed"))?,
            auc: num(f[2])?,
            logloss: num(f[3])?,
            wall_seconds: num(f[4])?,
        });
    }
    Ok(rows)
}

/// Appends `rows` to the CSV at `path`, writing the header for a new file.
/// Returns the number of rows written.
pub fn append_results_csv(rows: &[AblationRow], path: &Path) -> Result<usize> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    rows.iter().for_each(|r| text.push_str(&row_line(r)));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

/// `(config, seed)` pairs already present in `rows`.
pub fn completed(rows: &[AblationRow]) -> BTreeSet<(String, u64)> {
    rows.iter().map(|r| (r.config.clone(), r.seed)).collect()
}

/// Mean and std of AUC per config, sorted by mean descending.
pub fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.config.as_str()) {
            names.push(&r.config);
        }
    }
    let mut out: Vec<SummaryRow> = names
        .into_iter()
        .map(|name| {
            let aucs: Vec<f64> = rows.iter().filter(|r| r.config == name).map(|r| r.auc).collect();
            let n = aucs.len() as f64;
            let mean = aucs.iter().sum::<f64>() / n;
            let var = if aucs.len() > 1 {
                aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SummaryRow {
                config: name.to_string(),
                mean_auc: mean,
                std_auc: var.sqrt(),
                runs: aucs.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| b.mean_auc.total_cmp(&a.mean_auc).then_with(|| a.config.cmp(&b.config)));
    out
}

pub fn format_summary(summary: &[SummaryRow]) -> String {
    let width = summary.iter().map(|r| r.config.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>4}\n",
        "config", "mean_auc", "std_auc", "runs"
    );
    for r in summary {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>4}",
            r.config, r.mean_auc, r.std_auc, r.runs
        );
    }
    out
}

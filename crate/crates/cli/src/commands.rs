use std::path::{Path, PathBuf};

use cspm::checkpoint::Checkpoint;
use cspm::config::Precision;
use cspm::data::{generate as generate_data, load_jsonl, save_ground_truth, save_jsonl, split_holdout, Sample};
use cspm::evaluation::{
    append_results_csv, completed, format_summary, read_results_csv, run_ablation_grid, summarize, EvalResult,
};
use cspm::model::{AblationSwitches, Cspm, ModelSpec, ABLATION_GRID};
use cspm::stif::{gate_report, write_gate_report_csv};
use cspm::trainer::{write_metrics_csv, Trainer};
use cspm::{Error, ExperimentConfig, Result, Scalar};
use serde_json::json;

use crate::manifest;
use crate::Common;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Loads a dataset and checks every id against the configured vocabularies.
fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let samples = load_jsonl(path)?;
    let vocab = cfg.generator.vocab();
    for s in &samples {
        s.check_vocab(&vocab)?;
    }
    Ok(samples)
}

pub fn generate(common: &Common, args: &[String]) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.generator.seed = seed;
    }
    let dir = out_dir(common, &cfg)?;
    let (samples, truth) = generate_data(&cfg.generator)?;
    let data = dir.join("data.jsonl");
    save_jsonl(&samples, &data)?;
    save_ground_truth(&truth, &dir.join("ground_truth.json"))?;
    manifest::write(
        &dir,
        "generate",
        args,
        cfg.generator.seed,
        &cfg,
        serde_json::Value::Null,
    )?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} samples to {} (positive rate {:.4})",
        samples.len(),
        data.display(),
        positives as f64 / samples.len().max(1) as f64
    );
    Ok(())
}

pub fn train(
    common: &Common,
    data: &Path,
    ablation: Option<&str>,
    resume: Option<&Path>,
    args: &[String],
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(v) = ablation {
        AblationSwitches::from_name(v)?;
        cfg.model.variant = v.to_string();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let dir = out_dir(common, &cfg)?;
    let samples = load_data(data, &cfg)?;
    let (train, test) = split_holdout(&samples, cfg.eval.test_fraction);
    match cfg.train.precision {
        Precision::F32 => run_train::<f32>(&cfg, train, test, resume, &dir, args),
        Precision::F64 => run_train::<f64>(&cfg, train, test, resume, &dir, args),
    }
}

fn run_train<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &[Sample],
    test: &[Sample],
    resume: Option<&Path>,
    dir: &Path,
    args: &[String],
) -> Result<()> {
    let mut cfg = cfg.clone();
    let mut trainer: Trainer<T> = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.variant != cfg.model.variant {
                return Err(Error::Config(format!(
                    "checkpoint was trained as '{}' but the run asks for '{}'",
                    ck.variant, cfg.model.variant
                )));
            }
            cfg.seed = ck.seed;
            ck.trainer(Some(&cfg))?
        }
        None => {
            let switches = AblationSwitches::from_name(&cfg.model.variant)?;
            let model = Cspm::new(ModelSpec::from_config(&cfg), switches, cfg.seed)?;
            let mut t = Trainer::new(model, cfg.train.clone(), cfg.seed);
            t.eval_batch_size = cfg.eval.batch_size;
            t
        }
    };
    let switches = trainer.model.switches;
    manifest::write(
        dir,
        "train",
        args,
        cfg.seed,
        &cfg,
        json!({
            "variant": cfg.model.variant,
            "switches": {
                "use_csrl_loss": switches.use_csrl_loss,
                "use_cross_network": switches.use_cross_network,
                "use_stpe": switches.use_stpe,
                "use_stif": switches.use_stif,
                "attention_query_sar": switches.attention_query_sar,
            },
            "resumed_from": resume.map(|p| p.display().to_string()),
            "start_step": trainer.state.step,
        }),
    )?;
    let ck_path = dir.join("checkpoint.json");
    let metrics_path = dir.join("metrics.csv");
    let eval = (!test.is_empty()).then_some(test);
    trainer.train(train, eval, |t| {
        let m = t.history.last().expect("evaluated after a step");
        match m.eval_auc {
            Some(auc) => println!("step {} l_total {:.5} eval_auc {:.5}", m.step, m.l_total, auc),
            None => println!("step {} l_total {:.5}", m.step, m.l_total),
        }
        Checkpoint::capture(t, &cfg, &cfg.model.variant).save(&ck_path)?;
        write_metrics_csv(&t.history, &metrics_path)
    })?;
    Checkpoint::capture(&trainer, &cfg, &cfg.model.variant).save(&ck_path)?;
    write_metrics_csv(&trainer.history, &metrics_path)?;
    println!(
        "trained to step {}; checkpoint {}",
        trainer.state.step,
        ck_path.display()
    );
    Ok(())
}

pub fn eval(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    scores: Option<&Path>,
    all: bool,
    args: &[String],
) -> Result<()> {
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    let cfg = match (&common.config, &ck) {
        (None, Some(ck)) => ck.config.clone(),
        _ => load_config(common)?,
    };
    let samples = load_data(data, &cfg)?;
    let set = if all {
        &samples[..]
    } else {
        split_holdout(&samples, cfg.eval.test_fraction).1
    };
    let labels: Vec<u8> = set.iter().map(|s| s.label).collect();
    let probs = match (scores, &ck) {
        (Some(path), _) => read_scores(path, set.len())?,
        (None, Some(ck)) => match cfg.train.precision {
            Precision::F32 => checkpoint_scores::<f32>(ck, &cfg, set, common.out.as_deref())?,
            Precision::F64 => checkpoint_scores::<f64>(ck, &cfg, set, common.out.as_deref())?,
        },
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --scores".into())),
    };
    let result = EvalResult::from_probabilities(&probs, &labels)?;
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("eval.json");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        let seed = ck.as_ref().map_or(cfg.seed, |c| c.seed);
        manifest::write(dir, "eval", args, seed, &cfg, serde_json::Value::Null)?;
    }
    Ok(())
}

/// Predictions of the checkpointed model; with an output directory and a
/// model that has the feature filter, also writes `gates.csv`.
fn checkpoint_scores<T: Scalar>(
    ck: &Checkpoint,
    cfg: &ExperimentConfig,
    set: &[Sample],
    out: Option<&Path>,
) -> Result<Vec<f64>> {
    let model = ck.model::<T>(Some(cfg))?;
    if let (Some(dir), Some(_)) = (out, &model.gate) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stats = gate_report(&model, set, cfg.eval.batch_size)?;
        write_gate_report_csv(&stats, &dir.join("gates.csv"))?;
    }
    model.predict(set, cfg.eval.batch_size)
}

fn read_scores(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scores = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad score '{l}': {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if scores.len() != expected {
        return Err(Error::Validation {
            field: "scores".into(),
            message: format!("{} scores for {expected} samples", scores.len()),
        });
    }
    Ok(scores)
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("--seeds expects N or a comma-separated list, got '{spec}'"));
    if spec.contains(',') {
        return spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = spec.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    Ok((1..=n).collect())
}

pub fn ablate(
    common: &Common,
    data: &Path,
    seeds: Option<&str>,
    configs: Option<&str>,
    idempotent: bool,
    args: &[String],
) -> Result<()> {
    let cfg = load_config(common)?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => cfg.ablation.seeds.clone(),
    };
    let configs: Vec<String> = match configs {
        Some(c) => c.split(',').map(|s| s.trim().to_string()).collect(),
        None if !cfg.ablation.configs.is_empty() => cfg.ablation.configs.clone(),
        None => ABLATION_GRID.iter().map(|s| s.to_string()).collect(),
    };
    for c in &configs {
        AblationSwitches::from_name(c)?;
    }
    let dir = out_dir(common, &cfg)?;
    let results = dir.join("results.csv");
    let done = if idempotent && results.exists() {
        completed(&read_results_csv(&results)?)
    } else {
        Default::default()
    };
    let samples = load_data(data, &cfg)?;
    let (train, test) = split_holdout(&samples, cfg.eval.test_fraction);
    manifest::write(
        &dir,
        "ablate",
        args,
        cfg.seed,
        &cfg,
        json!({ "configs": configs, "seeds": seeds, "idempotent": idempotent }),
    )?;
    let mut new_rows = 0;
    for c in &configs {
        let todo: Vec<u64> = seeds
            .iter()
            .copied()
            .filter(|&s| !done.contains(&(c.clone(), s)))
            .collect();
        if todo.is_empty() {
            continue;
        }
        let rows = run_ablation_grid(&cfg, train, test, std::slice::from_ref(c), &todo, cfg.ablation.parallel)?;
        for r in &rows {
            println!("{} seed {} auc {:.5} ({:.1}s)", r.config, r.seed, r.auc, r.wall_seconds);
        }
        new_rows += append_results_csv(&rows, &results)?;
    }
    let all_rows = if results.exists() {
        read_results_csv(&results)?
    } else {
        Vec::new()
    };
    let summary = format_summary(&summarize(&all_rows));
    print!("{summary}");
    let path = dir.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    println!("{new_rows} new rows appended to {}", results.display());
    Ok(())
}

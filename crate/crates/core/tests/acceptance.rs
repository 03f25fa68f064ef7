//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any failed.
//!
//! The training criteria share one desk-scale dataset (100k train / 20k
//! test) and take tens of minutes on a single core. Set
//! `ACCEPTANCE_ONLY=1,2,9` to run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use cspm::checkpoint::Checkpoint;
use cspm::config::{ExperimentConfig, GeoMode};
use cspm::csrl::{
    mine_pairs, positive_candidates, separation, triplet_loss, CrossNetwork, MinedPairs, Triplet, TripletConfig,
};
use cspm::data::{generate, split_holdout, GroundTruth, Sample};
use cspm::evaluation::{auc, run_ablation_grid, summarize, AblationRow};
use cspm::gradcheck::{check_inputs, check_params, GradReport, FD_STEP};
use cspm::model::{ctr_loss, total_loss, total_loss_value, AblationSwitches, Cspm, ModelSpec, ABLATION_GRID};
use cspm::nn::{uniform, Linear};
use cspm::rng::seeded;
use cspm::stif::{stif_forward, GateParams};
use cspm::stpe::{stpe_forward, AttentionParams};
use cspm::tensor::ParamKind;
use cspm::trainer::{metrics_csv, Trainer};
use cspm::{Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

/// Seeds per gradient case.
const GRAD_SEEDS: u64 = 20;
const OP_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
/// Epochs for every training criterion except the one-epoch separation run.
const DESK_EPOCHS: usize = 6;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("AUC oracle equivalence", auc_oracle),
        ("pair-mining oracle equivalence", mining_oracle),
        ("null-signal sanity", null_signal),
        ("signal recovery", signal_recovery),
        ("ablation ordering", ablation_ordering),
        ("contrastive separation", contrastive_separation),
        ("determinism", determinism),
        ("loss-formula spot checks", loss_spot_checks),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if only.as_ref().is_none_or(|o| o.contains(&6)) {
        println!("alpha sweep (informational): {}", alpha_sweep());
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---- 1. gradients ----------------------------------------------------------

/// `sum(out * w)` with a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(uniform(g.shape(out), 1.0, seed, "project"));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn op_check(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| uniform(s, 1.0, seed, &format!("input{i}")))
        .collect();
    check_inputs(&inputs, FD_STEP, |g, v| {
        let out = f(g, v)?;
        project(g, out, seed)
    })
}

fn store_check(
    seed: u64,
    store: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradReport> {
    check_params(store, FD_STEP, usize::MAX, seed, |g, st| {
        let out = f(g, st)?;
        project(g, out, seed)
    })
}

fn random_mask(seed: u64, n: usize) -> Vec<bool> {
    let mut rng = seeded(seed, "mask");
    (0..n).map(|_| rng.gen_bool(0.6)).collect()
}

fn random_ids(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = seeded(seed, "ids");
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn embedding_store(seed: u64, vocab: usize, dim: usize) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store
        .insert(
            "table",
            ParamKind::Embedding,
            cspm::nn::init_embedding(vocab, dim, seed, "table"),
        )
        .unwrap();
    store
}

/// Redraws every dense parameter so zero-initialized layers are exercised.
fn randomize_dense(store: &mut ParamStore<f64>, seed: u64) {
    let dense: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Dense)
        .map(|(id, p)| (id, p.value.shape().to_vec(), p.name.clone()))
        .collect();
    for (id, shape, name) in dense {
        store.get_mut(id).value = uniform(&shape, 0.5, seed, &format!("redraw.{name}"));
    }
}

type Case = (&'static str, f64, Box<dyn Fn(u64) -> Result<GradReport>>);

fn op_cases() -> Vec<Case> {
    let op = |name: &'static str, f: Box<dyn Fn(u64) -> Result<GradReport>>| (name, OP_TOL, f);
    vec![
        op(
            "add (broadcast)",
            Box::new(|s| op_check(s, &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]))),
        ),
        op(
            "sub (broadcast)",
            Box::new(|s| op_check(s, &[&[2, 1, 3], &[2, 4, 3]], |g, v| g.sub(v[0], v[1]))),
        ),
        op(
            "mul (broadcast)",
            Box::new(|s| op_check(s, &[&[2, 4, 3], &[2, 1, 3]], |g, v| g.mul(v[0], v[1]))),
        ),
        op("relu", Box::new(|s| op_check(s, &[&[4, 5]], |g, v| g.relu(v[0])))),
        op(
            "sigmoid",
            Box::new(|s| {
                op_check(s, &[&[4, 5]], |g, v| {
                    let x = g.scale(v[0], 4.0)?;
                    g.sigmoid(x)
                })
            }),
        ),
        op(
            "tanh",
            Box::new(|s| {
                op_check(s, &[&[4, 5]], |g, v| {
                    let x = g.scale(v[0], 2.0)?;
                    g.tanh(x)
                })
            }),
        ),
        op(
            "scale",
            Box::new(|s| op_check(s, &[&[3, 3]], |g, v| g.scale(v[0], -1.7))),
        ),
        op(
            "add_scalar",
            Box::new(|s| op_check(s, &[&[3, 3]], |g, v| g.add_scalar(v[0], 0.4))),
        ),
        op(
            "matmul",
            Box::new(|s| op_check(s, &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]))),
        ),
        op(
            "bmm",
            Box::new(|s| op_check(s, &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false))),
        ),
        op(
            "bmm (trans_b)",
            Box::new(|s| op_check(s, &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true))),
        ),
        op(
            "softmax axis 0",
            Box::new(|s| op_check(s, &[&[3, 4]], |g, v| g.softmax(v[0], 0))),
        ),
        op(
            "softmax axis 1",
            Box::new(|s| op_check(s, &[&[3, 4]], |g, v| g.softmax(v[0], 1))),
        ),
        op(
            "masked_softmax",
            Box::new(|s| {
                let mask = random_mask(s, 15);
                op_check(s, &[&[3, 5]], move |g, v| {
                    let x = g.scale(v[0], 3.0)?;
                    g.masked_softmax(x, &mask)
                })
            }),
        ),
        op(
            "cosine_similarity",
            Box::new(|s| op_check(s, &[&[6], &[6]], |g, v| g.cosine_similarity(v[0], v[1]))),
        ),
        op(
            "cosine_rows",
            Box::new(|s| op_check(s, &[&[4, 6], &[4, 6]], |g, v| g.cosine_rows(v[0], v[1]))),
        ),
        op("sum", Box::new(|s| op_check(s, &[&[3, 4]], |g, v| g.sum(v[0])))),
        op("mean", Box::new(|s| op_check(s, &[&[3, 4]], |g, v| g.mean(v[0])))),
        op(
            "bce_with_logits",
            Box::new(|s| {
                let labels: Vec<f64> = random_mask(s, 8).into_iter().map(|b| f64::from(u8::from(b))).collect();
                op_check(s, &[&[8]], move |g, v| {
                    let x = g.scale(v[0], 3.0)?;
                    g.bce_with_logits(x, &labels)
                })
            }),
        ),
        op(
            "concat axis 0",
            Box::new(|s| op_check(s, &[&[2, 3], &[4, 3]], |g, v| g.concat(&[v[0], v[1]], 0))),
        ),
        op(
            "concat axis 1",
            Box::new(|s| op_check(s, &[&[2, 3], &[2, 1], &[2, 2]], |g, v| g.concat(v, 1))),
        ),
        op(
            "concat axis 2",
            Box::new(|s| op_check(s, &[&[2, 3, 1], &[2, 3, 2]], |g, v| g.concat(v, 2))),
        ),
        op(
            "reshape",
            Box::new(|s| op_check(s, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 2, 2]))),
        ),
        op(
            "index_select",
            Box::new(|s| {
                let idx = random_ids(s, 7, 4);
                op_check(s, &[&[4, 3]], move |g, v| g.index_select(v[0], &idx))
            }),
        ),
        op(
            "lookup",
            Box::new(|s| {
                let store = embedding_store(s, 9, 3);
                let id = store.id("table").unwrap();
                let ids = random_ids(s, 10, 9);
                store_check(s, &store, move |g, st| g.lookup(st, id, &ids))
            }),
        ),
        op(
            "lookup_bag_mean",
            Box::new(|s| {
                let store = embedding_store(s, 9, 3);
                let id = store.id("table").unwrap();
                let flat = random_ids(s, 9, 9);
                let bags = vec![flat[..3].to_vec(), Vec::new(), flat[3..].to_vec()];
                store_check(s, &store, move |g, st| g.lookup_bag_mean(st, id, &bags))
            }),
        ),
    ]
}

fn module_cases() -> Vec<Case> {
    vec![
        (
            "cross network",
            OP_TOL,
            Box::new(|s| {
                let mut store = ParamStore::new();
                let net = CrossNetwork::build(&mut store, 6, 2, s)?;
                randomize_dense(&mut store, s);
                let x = store.insert("x", ParamKind::Dense, uniform(&[3, 6], 1.0, s, "x"))?;
                store_check(s, &store, move |g, st| {
                    let x0 = g.param(st, x);
                    net.forward(g, st, x0)
                })
            }),
        ),
        (
            "attention",
            OP_TOL,
            Box::new(|s| {
                let (b, t) = (3, 5);
                let mut store = ParamStore::new();
                let params = AttentionParams::build(&mut store, 5, 4, 2, 3, s)?;
                let item = store.insert("item", ParamKind::Dense, uniform(&[b, 3], 1.0, s, "item"))?;
                let sar = store.insert("sar", ParamKind::Dense, uniform(&[b, 2], 1.0, s, "sar"))?;
                let seq = store.insert("seq", ParamKind::Dense, uniform(&[b, t, 4], 1.0, s, "seq"))?;
                let mut mask = random_mask(s, b * t);
                mask[..t].iter_mut().for_each(|m| *m = false);
                store_check(s, &store, move |g, st| {
                    let (i, q, k) = (g.param(st, item), g.param(st, sar), g.param(st, seq));
                    Ok(stpe_forward(g, st, &params, i, Some(q), k, &mask)?.u)
                })
            }),
        ),
        ("gate", OP_TOL, Box::new(|s| gate_case(s, false))),
        ("gate (literal)", OP_TOL, Box::new(|s| gate_case(s, true))),
        (
            "head",
            OP_TOL,
            Box::new(|s| {
                let mut store = ParamStore::new();
                let l1 = Linear::build(&mut store, "head.0", 6, 5, s)?;
                let out = Linear::build(&mut store, "head.out", 5, 1, s)?;
                randomize_dense(&mut store, s);
                let x = store.insert("x", ParamKind::Dense, uniform(&[4, 6], 1.0, s, "x"))?;
                store_check(s, &store, move |g, st| {
                    let x = g.param(st, x);
                    let h = l1.forward(g, st, x)?;
                    let h = g.relu(h)?;
                    out.forward(g, st, h)
                })
            }),
        ),
        (
            "triplet loss",
            OP_TOL,
            Box::new(|s| {
                let mined = MinedPairs {
                    triplets: vec![
                        Triplet {
                            anchor: 0,
                            positive: 1,
                            negatives: vec![2, 3, 3],
                        },
                        Triplet {
                            anchor: 2,
                            positive: 3,
                            negatives: vec![0, 1, 4],
                        },
                    ],
                    ..Default::default()
                };
                let cfg = TripletConfig {
                    margin: 1.0,
                    n_v: 3,
                    time_window: 1800,
                    geo_mode: GeoMode::Region,
                    grid_size: 8,
                    literal: false,
                };
                check_inputs(&[uniform(&[5, 4], 1.0, s, "sar")], FD_STEP, |g, v| {
                    triplet_loss(g, v[0], &mined, &cfg)
                })
            }),
        ),
        ("end-to-end", END_TO_END_TOL, Box::new(end_to_end_case)),
    ]
}

fn gate_case(s: u64, literal: bool) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let params = GateParams::build(&mut store, 3, 3, 3, 4, 2, s)?;
    randomize_dense(&mut store, s);
    let sar = store.insert("sar", ParamKind::Dense, uniform(&[2, 3], 1.0, s, "sar"))?;
    let z: Vec<_> = (0..3)
        .map(|j| {
            store.insert(
                &format!("z{j}"),
                ParamKind::Dense,
                uniform(&[2, 3], 1.0, s, &format!("z{j}")),
            )
        })
        .collect::<Result<_>>()?;
    store_check(s, &store, move |g, st| {
        let sv = g.param(st, sar);
        let zv: Vec<Var> = z.iter().map(|&id| g.param(st, id)).collect();
        Ok(stif_forward(g, st, &params, sv, &zv, literal)?.o)
    })
}

fn end_to_end_case(s: u64) -> Result<GradReport> {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.n_users = 20;
    cfg.generator.n_items = 30;
    cfg.generator.samples = 6;
    cfg.generator.seq_len_range = [0, 5];
    cfg.generator.seed = s;
    cfg.embedding.dim = 3;
    cfg.embedding.max_seq_len = 3;
    cfg.stpe.heads = 2;
    cfg.stpe.d_k = 2;
    cfg.stif.hidden = 3;
    cfg.stif.feature_id_dim = 2;
    cfg.model.head_widths = vec![4];
    cfg.csrl.margin = 1.0;
    let (data, _) = generate(&cfg.generator)?;
    let mut model = Cspm::<f64>::new(ModelSpec::from_config(&cfg), AblationSwitches::FULL, s)?;
    randomize_dense(&mut model.params, s);
    let batch: Vec<&Sample> = data.iter().collect();
    let labels: Vec<u8> = batch.iter().map(|x| x.label).collect();
    let mined = MinedPairs {
        triplets: vec![
            Triplet {
                anchor: 0,
                positive: 1,
                negatives: vec![2, 3],
            },
            Triplet {
                anchor: 4,
                positive: 5,
                negatives: vec![0, 0],
            },
        ],
        ..Default::default()
    };
    let tcfg = model.spec.triplet();
    check_params(&model.params, FD_STEP, 300, s, |g, store| {
        let mut probe = model.clone();
        probe.params = store.clone();
        let out = probe.forward(g, &batch)?;
        let l_ctr = ctr_loss(g, out.logits, &labels)?;
        let l_cl = triplet_loss(g, out.sar, &mined, &tcfg)?;
        total_loss(g, l_ctr, l_cl, 0.6)
    })
}

fn gradient_suite() -> Outcome {
    let mut worst_op = (0.0, String::new());
    let mut worst_e2e = (0.0, String::new());
    let mut failures = Vec::new();
    let mut cases = 0;
    for (name, tol, case) in op_cases().into_iter().chain(module_cases()) {
        cases += 1;
        for seed in 0..GRAD_SEEDS {
            let report = case(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let worst = if tol == OP_TOL { &mut worst_op } else { &mut worst_e2e };
            if report.max_rel_error > worst.0 {
                *worst = (report.max_rel_error, format!("{name} seed {seed}"));
            }
            if report.max_rel_error >= tol {
                failures.push(format!("{name} seed {seed}: {report:?}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{cases} cases x {GRAD_SEEDS} seeds; worst op/module {:.2e} at {}, worst end-to-end {:.2e} at {}{}",
            worst_op.0,
            worst_op.1,
            worst_e2e.0,
            worst_e2e.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(" | "))
            }
        ),
    )
}

// ---- 2. AUC ----------------------------------------------------------------

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut tied = 0;
    for instance in 0..100u64 {
        let mut rng = seeded(instance, "auc");
        let n = rng.gen_range(2..=500);
        let levels = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / 7.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        if BTreeSet::from_iter(scores.iter().map(|s| s.to_bits())).len() < n {
            tied += 1;
        }
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute_force_auc(&scores, &labels)).abs());
    }
    check(
        worst <= 1e-12,
        format!("100 instances ({tied} with ties), max |diff| {worst:.1e}"),
    )
}

// ---- 3. pair mining ----------------------------------------------------------

fn quadrant(cell: usize, grid: usize) -> usize {
    let (row, col) = ((cell - 1) / grid, (cell - 1) % grid);
    2 * usize::from(row >= grid / 2) + usize::from(col >= grid / 2)
}

fn brute_positive(a: &Sample, b: &Sample, cfg: &TripletConfig) -> bool {
    let geo = match cfg.geo_mode {
        GeoMode::Cell => a.geohash_cell == b.geohash_cell,
        GeoMode::Region => quadrant(a.geohash_cell, cfg.grid_size) == quadrant(b.geohash_cell, cfg.grid_size),
    };
    let shared = a.query_tokens.iter().any(|t| b.query_tokens.contains(t));
    geo && (a.timestamp - b.timestamp).abs() <= cfg.time_window && shared
}

fn mining_oracle() -> Outcome {
    let mut gcfg = cspm::data::GeneratorConfig {
        samples: 32,
        n_users: 30,
        n_items: 40,
        ..Default::default()
    };
    let mut triplets = 0;
    for b in 0..200u64 {
        gcfg.seed = b;
        let (mut pool, _) = generate(&gcfg).map_err(|e| e.to_string())?;
        let mut rng = seeded(b, "batch");
        let n = rng.gen_range(1..=32);
        pool.truncate(n);
        // crowd the batch into a few cells, a short time span and few tokens
        for s in &mut pool {
            s.geohash_cell = rng.gen_range(1..=64);
            s.timestamp = 50_000 + rng.gen_range(0..4_000);
            let k = rng.gen_range(0..3);
            s.query_tokens = (0..k).map(|_| rng.gen_range(1..6)).collect();
        }
        let cfg = TripletConfig {
            margin: 0.3,
            n_v: rng.gen_range(1..5),
            time_window: 1800,
            geo_mode: if b % 2 == 0 { GeoMode::Region } else { GeoMode::Cell },
            grid_size: 8,
            literal: false,
        };
        let batch: Vec<&Sample> = pool.iter().collect();
        let truth: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && brute_positive(batch[i], batch[j], &cfg))
                    .collect()
            })
            .collect();
        if positive_candidates(&batch, &cfg) != truth {
            return Err(format!("batch {b}: positive sets differ"));
        }
        let mined = mine_pairs(&batch, &cfg, &mut seeded(b, "mine"));
        let (mut no_pos, mut no_neg) = (0, 0);
        let mut expected_anchors = Vec::new();
        for (i, pos) in truth.iter().enumerate() {
            if n < 3 || pos.is_empty() {
                no_pos += 1;
            } else if pos.len() == n - 1 {
                no_neg += 1;
            } else {
                expected_anchors.push(i);
            }
        }
        let anchors: Vec<usize> = mined.triplets.iter().map(|t| t.anchor).collect();
        if anchors != expected_anchors || mined.skipped_no_positive != no_pos || mined.skipped_no_negative != no_neg {
            return Err(format!("batch {b}: anchors or skip counts differ"));
        }
        for t in &mined.triplets {
            let pos = &truth[t.anchor];
            let ok = pos.contains(&t.positive)
                && t.negatives.len() == cfg.n_v
                && t.negatives.iter().all(|&j| j != t.anchor && j < n && !pos.contains(&j));
            if !ok {
                return Err(format!("batch {b}: invalid triplet {t:?}"));
            }
        }
        triplets += mined.triplets.len();
    }
    Ok(format!("200 batches, {triplets} triplets checked"))
}

// ---- training criteria -------------------------------------------------------

/// 100k train / 20k test samples with the default generator and model.
fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.samples = 120_000;
    cfg.eval.test_fraction = 1.0 / 6.0;
    cfg.train.epochs = DESK_EPOCHS;
    cfg
}

struct Desk {
    cfg: ExperimentConfig,
    data: Vec<Sample>,
    truth: GroundTruth,
}

impl Desk {
    fn new(cfg: ExperimentConfig) -> Self {
        let (data, truth) = generate(&cfg.generator).expect("generator config is valid");
        Self { cfg, data, truth }
    }

    fn split(&self) -> (&[Sample], &[Sample]) {
        split_holdout(&self.data, self.cfg.eval.test_fraction)
    }
}

fn desk() -> &'static Desk {
    static DESK: std::sync::OnceLock<Desk> = std::sync::OnceLock::new();
    DESK.get_or_init(|| Desk::new(desk_config()))
}

fn grid() -> &'static std::result::Result<Vec<AblationRow>, String> {
    static GRID: std::sync::OnceLock<std::result::Result<Vec<AblationRow>, String>> = std::sync::OnceLock::new();
    GRID.get_or_init(|| {
        let d = desk();
        let (train, test) = d.split();
        let configs: Vec<String> = ABLATION_GRID.iter().map(|s| s.to_string()).collect();
        run_ablation_grid(&d.cfg, train, test, &configs, &[1, 2, 3], false).map_err(|e| e.to_string())
    })
}

fn null_signal() -> Outcome {
    let mut cfg = desk_config();
    cfg.generator.samples = 70_000;
    cfg.generator.spatiotemporal_signal = 0.0;
    cfg.generator.taste_strength = 0.0;
    cfg.eval.test_fraction = 2.0 / 7.0;
    let d = Desk::new(cfg);
    let (train, test) = d.split();
    let row = cspm::evaluation::train_and_evaluate(&d.cfg, "full", 1, train, test).map_err(|e| e.to_string())?;
    check(
        (0.48..=0.52).contains(&row.auc),
        format!("{} train / {} test, test AUC {:.4}", train.len(), test.len(), row.auc),
    )
}

fn oracle_auc(d: &Desk) -> f64 {
    let (_, test) = d.split();
    let scores: Vec<f64> = test.iter().map(|s| d.truth.logit(s)).collect();
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    auc(&scores, &labels).expect("test set has both classes")
}

fn signal_recovery() -> Outcome {
    let d = desk();
    let oracle = oracle_auc(d);
    let rows = grid().as_ref().map_err(Clone::clone)?;
    let full = rows
        .iter()
        .find(|r| r.config == "full" && r.seed == 1)
        .expect("grid has full/1");
    check(
        full.auc >= oracle - 0.15,
        format!(
            "full AUC {:.4}, oracle {:.4}, threshold {:.4}",
            full.auc,
            oracle,
            oracle - 0.15
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let rows = grid().as_ref().map_err(Clone::clone)?;
    let summary = summarize(rows);
    let mean = |name: &str| {
        summary
            .iter()
            .find(|r| r.config == name)
            .map(|r| r.mean_auc)
            .expect("all rows present")
    };
    let full = mean("full");
    let all_off = mean("w/o_CSRL+StPE+StIF");
    let singles = ["w/o_CSRL(L_CL)", "w/o_CSRL(DCN-v2)", "w/o_CSRL", "w/o_StPE", "w/o_StIF"];
    // (description, amount by which the expected order is violated)
    let mut comparisons: Vec<(String, f64)> = Vec::new();
    for s in singles {
        comparisons.push((format!("full >= {s}"), mean(s) - full));
        comparisons.push((format!("{s} >= all-off"), all_off - mean(s)));
    }
    comparisons.push(("w/o_CSRL <= w/o_StIF".into(), mean("w/o_CSRL") - mean("w/o_StIF")));
    let inversions: Vec<&(String, f64)> = comparisons.iter().filter(|(_, v)| *v > 0.0).collect();
    let tolerated = match inversions.as_slice() {
        [] => true,
        [(_, v)] => *v <= 0.002,
        _ => false,
    };
    let gap = full - all_off;
    let table: Vec<String> = summary
        .iter()
        .map(|r| format!("{} {:.4}", r.config, r.mean_auc))
        .collect();
    let inv: Vec<String> = inversions
        .iter()
        .map(|(d, v)| format!("{d} violated by {v:.4}"))
        .collect();
    check(
        tolerated && gap > 0.005,
        format!(
            "means: {}; full - all-off {gap:.4}; inversions: {}",
            table.join(", "),
            if inv.is_empty() { "none".into() } else { inv.join(", ") }
        ),
    )
}

/// Full-model test AUC at seed 1 for several loss weightings; 0.7 comes
/// from the ablation grid.
fn alpha_sweep() -> String {
    let d = desk();
    let (train, test) = d.split();
    let mut parts = Vec::new();
    for alpha in [0.3, 0.5, 0.7, 0.9] {
        let auc = if alpha == d.cfg.model.alpha {
            grid()
                .as_ref()
                .ok()
                .and_then(|rows| rows.iter().find(|r| r.config == "full" && r.seed == 1))
                .map(|r| r.auc)
        } else {
            let mut cfg = d.cfg.clone();
            cfg.model.alpha = alpha;
            cspm::evaluation::train_and_evaluate(&cfg, "full", 1, train, test)
                .ok()
                .map(|r| r.auc)
        };
        parts.push(match auc {
            Some(a) => format!("alpha {alpha} AUC {a:.4}"),
            None => format!("alpha {alpha} failed"),
        });
    }
    parts.join(", ")
}

fn mean_separation(m: &Cspm<f32>, held_out: &[Sample]) -> f64 {
    let cfg = m.spec.triplet();
    let mut rng = seeded(0, "held-out mining");
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in held_out.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mined = mine_pairs(&refs, &cfg, &mut rng);
        if let Some(s) = separation(&m.sar(&refs).expect("sar"), &mined) {
            total += s;
            n += 1.0;
        }
    }
    total / n
}

fn contrastive_separation() -> Outcome {
    let d = desk();
    let mut cfg = d.cfg.clone();
    cfg.model.alpha = 0.0;
    cfg.train.epochs = 1;
    let (train, test) = d.split();
    let model = Cspm::<f32>::new(ModelSpec::from_config(&cfg), AblationSwitches::FULL, 1).map_err(|e| e.to_string())?;
    let before = mean_separation(&model, test);
    let mut trainer = Trainer::new(model, cfg.train.clone(), 1);
    trainer.train(train, None, |_| Ok(())).map_err(|e| e.to_string())?;
    let after = mean_separation(&trainer.model, test);
    check(
        after - before >= 0.1,
        format!("held-out separation {before:.4} -> {after:.4} (+{:.4})", after - before),
    )
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.generator.samples = 12_000;
    cfg.eval.test_fraction = 1.0 / 6.0;
    cfg.train.epochs = 2;
    cfg.train.eval_every = 10;
    let d = Desk::new(cfg);
    let (train, test) = d.split();
    let run = |seed: u64| -> Result<String> {
        let model = Cspm::<f32>::new(ModelSpec::from_config(&d.cfg), AblationSwitches::FULL, seed)?;
        let mut t = Trainer::new(model, d.cfg.train.clone(), seed);
        t.train(train, Some(test), |_| Ok(()))?;
        // the checkpoint must not perturb anything either
        let ck = Checkpoint::capture(&t, &d.cfg, "full");
        assert_eq!(ck.history, t.history);
        Ok(metrics_csv(&t.history))
    };
    let (a, b, other) = (
        run(4).map_err(|e| e.to_string())?,
        run(4).map_err(|e| e.to_string())?,
        run(5).map_err(|e| e.to_string())?,
    );
    check(
        a == b && a != other,
        format!(
            "{} CSV lines, identical: {}, differs under another seed: {}",
            a.lines().count(),
            a == b,
            a != other
        ),
    )
}

fn loss_spot_checks() -> Outcome {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let l = ctr_loss(&mut g, logits, &[0, 1]).map_err(|e| e.to_string())?;
    let ctr = g.value(l).data()[0];
    let ctr_ok = (ctr - std::f64::consts::LN_2).abs() <= 1e-9;

    let a = g.constant(Tensor::from_f64(&[], &[0.37]).unwrap());
    let b = g.constant(Tensor::from_f64(&[], &[1.91]).unwrap());
    let t0 = total_loss(&mut g, a, b, 0.0).map_err(|e| e.to_string())?;
    let t1 = total_loss(&mut g, a, b, 1.0).map_err(|e| e.to_string())?;
    let bounds_ok = g.value(t0).data()[0] == 1.91
        && g.value(t1).data()[0] == 0.37
        && matches!(total_loss_value(0.37, 1.91, 0.0), Ok(v) if v == 1.91)
        && matches!(total_loss_value(0.37, 1.91, 1.0), Ok(v) if v == 0.37);

    // anchor and positive aligned, negatives orthogonal or opposite: cos gap >= margin
    let sar = g.constant(Tensor::from_f64(&[4, 2], &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap());
    let mined = MinedPairs {
        triplets: vec![Triplet {
            anchor: 0,
            positive: 1,
            negatives: vec![2, 3],
        }],
        ..Default::default()
    };
    let cfg = TripletConfig {
        margin: 0.5,
        n_v: 2,
        time_window: 1800,
        geo_mode: GeoMode::Region,
        grid_size: 8,
        literal: false,
    };
    let hinge = triplet_loss(&mut g, sar, &mined, &cfg).map_err(|e| e.to_string())?;
    let hinge = g.value(hinge).data()[0];
    check(
        ctr_ok && bounds_ok && hinge == 0.0,
        format!("ctr_loss(0.5) = {ctr:.12}, alpha bounds exact: {bounds_ok}, separated hinge = {hinge}"),
    )
}

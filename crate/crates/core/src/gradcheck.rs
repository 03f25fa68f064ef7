//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to validate every analytic gradient produced by
//! [`Graph::backward`]. Always run at `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative discrepancy found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.coords_checked += 1;
        let err = relative_error(analytic, numeric);
        if self.worst.is_empty() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = what();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    g.value(v).item()
}

/// Checks gradients of `f` with respect to every element of `inputs`.
///
/// `f` receives a fresh graph and one variable per input, and must return a
/// single-element loss.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        scalar_of(&g, loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            report.record(|| format!("input {k}[{i}]"), analytic[i], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of `f` against finite differences.
///
/// At most `max_coords` coordinates per parameter are probed (sampled with
/// `seed`); embedding tables are probed only at rows that received gradient,
/// since the frozen padding row and unvisited rows are not trainable here.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, max_coords: usize, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let grads = g.take_param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        let numel = p.value.numel();
        let analytic = grads
            .get(id)
            .map(|pg| pg.to_dense(numel))
            .unwrap_or_else(|| vec![0.0; numel]);
        let candidates: Vec<usize> = match p.kind {
            crate::tensor::ParamKind::Dense => (0..numel).collect(),
            crate::tensor::ParamKind::Embedding => {
                let dim = p.value.shape()[1];
                (1..p.value.shape()[0])
                    .filter(|&r| analytic[r * dim..(r + 1) * dim].iter().any(|&v| v != 0.0))
                    .flat_map(|r| r * dim..(r + 1) * dim)
                    .collect()
            }
        };
        let picked: Vec<usize> = if candidates.len() <= max_coords {
            candidates
        } else {
            let mut idx: Vec<usize> = sample(&mut rng, candidates.len(), max_coords)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            idx.sort_unstable();
            idx
        };
        for i in picked {
            let x0 = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = x0 + h;
            let up = {
                let mut g = Graph::new();
                let l = f(&mut g, &work)?;
                scalar_of(&g, l)?
            };
            work.get_mut(id).value.data_mut()[i] = x0 - h;
            let down = {
                let mut g = Graph::new();
                let l = f(&mut g, &work)?;
                scalar_of(&g, l)?
            };
            work.get_mut(id).value.data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            report.record(|| format!("{}[{i}]", p.name), analytic[i], numeric);
        }
    }
    Ok(report)
}

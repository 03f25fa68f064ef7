//! Parameter initialization and the dense layer shared by the modules.

use rand::Rng;

use crate::error::Result;
use crate::rng::seeded;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

/// Uniform in `[-bound, bound]`, drawn from a stream derived from `(seed, name)`
/// so that each parameter's initial value is independent of which other
/// parameters exist.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = seeded(seed, name);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Embedding table with the padding row 0 zeroed.
pub fn init_embedding<T: Scalar>(vocab: usize, dim: usize, seed: u64, name: &str) -> Tensor<T> {
    let mut t = uniform::<T>(&[vocab, dim], 1.0 / (dim as f64).sqrt(), seed, name);
    t.data_mut()[..dim].iter_mut().for_each(|v| *v = T::zero());
    t
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = uniform::<T>(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), seed, &wname);
        Ok(Self {
            weight: store.insert(&wname, ParamKind::Dense, w)?,
            bias: store.insert(&format!("{name}.bias"), ParamKind::Dense, Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.weight, self.bias] {
            store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
}

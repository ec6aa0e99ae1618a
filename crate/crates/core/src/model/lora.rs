use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{c, ModelConfig, Scalar, ToyModel};
use crate::error::{Error, Result};

pub const DEFAULT_LORA_RANK: usize = 32;
pub const DEFAULT_LORA_ALPHA: f64 = 32.0;

/// Low-rank update `(α/r)·B·A` of one `dim × dim` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `r × dim`.
    pub a: Array2<T>,
    /// `dim × r`, zero at initialization.
    pub b: Array2<T>,
}

/// Adapters on the query, key, value and output projections of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    /// Per block: q, k, v, o.
    pub blocks: Vec<[LoraPair<T>; 4]>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("adapter alpha {alpha} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new(-bound, bound).unwrap();
        let mut pair = || LoraPair {
            a: Array2::from_shape_simple_fn((rank, d), || c(dist.sample(&mut rng))),
            b: Array2::zeros((d, rank)),
        };
        let blocks = (0..config.blocks).map(|_| [pair(), pair(), pair(), pair()]).collect();
        Ok(Self { rank, alpha, blocks })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.blocks.len() != config.blocks {
            return Err(Error::ShapeMismatch(format!(
                "adapter has {} blocks, model has {}",
                self.blocks.len(),
                config.blocks
            )));
        }
        let (r, d) = (self.rank, config.dim);
        for pair in self.blocks.iter().flatten() {
            if pair.a.dim() != (r, d) || pair.b.dim() != (d, r) {
                return Err(Error::ShapeMismatch(format!(
                    "adapter factors {:?}/{:?} do not fit rank {r} at width {d}",
                    pair.a.dim(),
                    pair.b.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.blocks.iter().flatten().flat_map(|p| [&p.a, &p.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.blocks.iter_mut().flatten().flat_map(|p| [&mut p.a, &mut p.b]).collect()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.blocks.len() {
            for proj in ["q", "k", "v", "o"] {
                v.push(format!("blocks.{i}.{proj}.a"));
                v.push(format!("blocks.{i}.{proj}.b"));
            }
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale_by(&mut self, k: T) {
        self.tensors_mut().into_iter().for_each(|t| t.mapv_inplace(|v| v * k));
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        let f = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.clone().map(|p| LoraPair { a: f(&p.a), b: f(&p.b) }))
                .collect(),
        }
    }
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` for row-vector inputs.
pub fn lora_forward<T: Scalar>(x: &Array2<T>, w: &Array2<T>, pair: &LoraPair<T>, scale: f64) -> Array2<T> {
    super::project(x, w, Some((pair, c(scale)))).0
}

/// Validates that `adapter` fits `model`; the adapter is then passed to each
/// forward call while the base weights stay untouched.
pub fn lora_mount<T: Scalar>(model: &ToyModel<T>, adapter: &LoraAdapter<T>) -> Result<()> {
    adapter.check(&model.config)
}

/// Dense model with `W + (α/r)·B·A` folded into every adapted projection.
pub fn merge_adapter<T: Scalar>(model: &ToyModel<T>, adapter: &LoraAdapter<T>) -> Result<ToyModel<T>> {
    adapter.check(&model.config)?;
    let mut params = model.params.clone();
    let s: T = c(adapter.scale());
    for (bp, pairs) in params.blocks.iter_mut().zip(&adapter.blocks) {
        for (w, pair) in [&mut bp.wq, &mut bp.wk, &mut bp.wv, &mut bp.wo].into_iter().zip(pairs) {
            w.scaled_add(s, &pair.b.dot(&pair.a));
        }
    }
    Ok(ToyModel::from_params(model.config.clone(), params))
}

//! Small history-conditioned diffusion transformer with three-axis rotary
//! attention, hand-written backpropagation and low-rank adapters.

mod checkpoint;
mod lora;
mod rope;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, Range, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{PackMode, PackedSequence, Role};

pub use checkpoint::{load_adapter, load_model, save_adapter, save_model, ADAPTER_MAGIC, MODEL_MAGIC};
pub use lora::{lora_forward, lora_mount, merge_adapter, LoraAdapter, LoraPair, DEFAULT_LORA_ALPHA, DEFAULT_LORA_RANK};
pub use rope::{rope_rotate, rotate_rows, RopeTable};
pub use train::{
    build_condition, data_tokens, finetune_windows, flow_pair, flow_sample, lora_finetune, train, AdamW,
    FinetuneConfig, TrainConfig, TrainReport, Window,
};

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Patch height and width in pixels.
    pub patch: [usize; 2],
    /// Frame width and height in pixels.
    pub resolution: [usize; 2],
    pub rope_base: f64,
    /// Share of rotary pairs driven by the t, r and c axes.
    pub rope_split: [f64; 3],
    pub target_frames: usize,
    pub max_history_frames: usize,
    pub sample_steps: usize,
    /// Rows of the timestep embedding table, interpolated linearly.
    pub time_bins: usize,
    pub max_tokens: usize,
}

impl ModelConfig {
    /// Full-size configuration: 64×64 frames, 8×8 patches, width 128.
    pub fn standard() -> Self {
        let mut c = Self {
            dim: 128,
            heads: 4,
            blocks: 6,
            mlp_hidden: 512,
            patch: [8, 8],
            resolution: [64, 64],
            rope_base: 10000.0,
            rope_split: [0.5, 0.25, 0.25],
            target_frames: 8,
            max_history_frames: 8,
            sample_steps: 6,
            time_bins: 33,
            max_tokens: 0,
        };
        c.max_tokens = c.default_max_tokens();
        c
    }

    /// Reduced configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self {
            dim: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 128,
            patch: [8, 8],
            resolution: [32, 32],
            rope_base: 100.0,
            rope_split: [0.5, 0.25, 0.25],
            target_frames: 8,
            max_history_frames: 4,
            sample_steps: 6,
            time_bins: 17,
            max_tokens: 0,
        };
        c.max_tokens = c.default_max_tokens();
        c
    }

    /// Width-16 configuration for numerical gradient checks.
    pub fn micro() -> Self {
        let mut c = Self {
            dim: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 24,
            patch: [2, 2],
            resolution: [4, 4],
            rope_base: 100.0,
            rope_split: [0.5, 0.25, 0.25],
            target_frames: 2,
            max_history_frames: 2,
            sample_steps: 3,
            time_bins: 5,
            max_tokens: 0,
        };
        c.max_tokens = c.default_max_tokens();
        c
    }

    /// Room for a full history, a full warp band and the targets.
    pub fn default_max_tokens(&self) -> usize {
        (self.max_history_frames + 2 * self.target_frames) * self.tokens_per_frame()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn token_dim(&self) -> usize {
        self.patch[0] * self.patch[1] * 3
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.resolution[1] / self.patch[0], self.resolution[0] / self.patch[1])
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Rotary pair counts for the t, r and c axes.
    pub fn rope_pairs(&self) -> [usize; 3] {
        let pairs = self.head_dim() / 2;
        let n_t = (pairs as f64 * self.rope_split[0]).round() as usize;
        let n_r = ((pairs as f64 * self.rope_split[1]).round() as usize).min(pairs - n_t);
        [n_t, n_r, pairs - n_t - n_r]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.dim == 0 || self.dim % (2 * self.heads) != 0 {
            return bad(format!("dim {} must be a positive multiple of 2·heads ({})", self.dim, 2 * self.heads));
        }
        if (self.rope_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.rope_split.iter().any(|&s| s < 0.0) {
            return bad(format!("rope_split {:?} must be non-negative and sum to 1", self.rope_split));
        }
        if self.rope_base <= 1.0 {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        let [ph, pw] = self.patch;
        let [w, h] = self.resolution;
        if ph == 0 || pw == 0 || w % pw != 0 || h % ph != 0 {
            return bad(format!("{w}x{h} frames are not divisible into {pw}x{ph} patches"));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 || self.target_frames == 0 || self.sample_steps == 0 {
            return bad("blocks, mlp_hidden, target_frames and sample_steps must be positive".into());
        }
        if self.time_bins < 2 {
            return bad("time_bins must be at least 2".into());
        }
        if self.max_tokens < self.target_frames * self.tokens_per_frame() {
            return bad("max_tokens cannot hold one target chunk".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array2<T>,
    pub w2: Array2<T>,
    pub b2: Array2<T>,
}

/// Every model tensor. Linear weights are stored `out × in`; vectors are
/// `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub w_in: Array2<T>,
    pub b_in: Array2<T>,
    /// Projection of channel-fused warp patches; zero until trained.
    pub w_fuse: Array2<T>,
    pub time_table: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: Array2<T>,
    pub lnf_b: Array2<T>,
    pub w_out: Array2<T>,
    pub b_out: Array2<T>,
    /// Gain on the target state added to the readout, one per time bin.
    pub out_skip: Array2<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn tensors(&self) -> [&Array2<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g, &self.ln2_b, &self.w1,
            &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    const NAMES: [&'static str; 12] = ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"];
}

impl<T: Scalar> Params<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, p, m) = (config.dim, config.token_dim(), config.mlp_hidden);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<T> {
            let n = Normal::new(0.0, std).unwrap();
            Array2::from_shape_simple_fn((rows, cols), || c(n.sample(&mut rng)))
        };
        let residual = 1.0 / (2.0 * config.blocks as f64).sqrt();
        let w_in = normal(d, p, 1.0 / (p as f64).sqrt());
        let time_table = normal(config.time_bins, d, 0.5);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                wq: normal(d, d, 1.0 / (d as f64).sqrt()),
                wk: normal(d, d, 1.0 / (d as f64).sqrt()),
                wv: normal(d, d, 1.0 / (d as f64).sqrt()),
                wo: normal(d, d, residual / (d as f64).sqrt()),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                w1: normal(m, d, 1.0 / (d as f64).sqrt()),
                b1: Array2::zeros((1, m)),
                w2: normal(d, m, residual / (m as f64).sqrt()),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        let w_out = normal(p, d, 0.1 / (d as f64).sqrt());
        Self {
            w_in,
            b_in: Array2::zeros((1, d)),
            w_fuse: Array2::zeros((d, p)),
            time_table,
            blocks,
            lnf_g: Array2::ones((1, d)),
            lnf_b: Array2::zeros((1, d)),
            w_out,
            b_out: Array2::zeros((1, p)),
            out_skip: Array2::from_elem((config.time_bins, 1), -T::one()),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<T>> {
        let mut v = vec![&self.w_in, &self.b_in, &self.w_fuse, &self.time_table];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out, &self.out_skip]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut v = vec![&mut self.w_in, &mut self.b_in, &mut self.w_fuse, &mut self.time_table];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out, &mut self.b_out, &mut self.out_skip]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["w_in", "b_in", "w_fuse", "time_table"].map(String::from).into();
        for i in 0..self.blocks.len() {
            v.extend(BlockParams::<T>::NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        v.extend(["lnf_g", "lnf_b", "w_out", "b_out", "out_skip"].map(String::from));
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

    pub fn scale(&mut self, k: T) {
        self.tensors_mut().into_iter().for_each(|t| t.mapv_inplace(|v| v * k));
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let f = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
        Params {
            w_in: f(&self.w_in),
            b_in: f(&self.b_in),
            w_fuse: f(&self.w_fuse),
            time_table: f(&self.time_table),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: f(&b.ln1_g),
                    ln1_b: f(&b.ln1_b),
                    wq: f(&b.wq),
                    wk: f(&b.wk),
                    wv: f(&b.wv),
                    wo: f(&b.wo),
                    ln2_g: f(&b.ln2_g),
                    ln2_b: f(&b.ln2_b),
                    w1: f(&b.w1),
                    b1: f(&b.b1),
                    w2: f(&b.w2),
                    b2: f(&b.b2),
                })
                .collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
            out_skip: f(&self.out_skip),
        }
    }

    /// Order-independent digest of every parameter value.
    pub fn checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.tensors() {
            for v in t.iter() {
                h.write_u64(v.to_f64().unwrap().to_bits());
            }
        }
        h.finish()
    }
}

pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    rope: RopeTable,
    evaluations: AtomicU64,
}

impl<T: Scalar> Clone for ToyModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            rope: self.rope.clone(),
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl<T: Scalar> Debug for ToyModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyModel").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grads<T> {
    Base(Params<T>),
    Adapter(LoraAdapter<T>),
}

impl<T: Scalar> Grads<T> {
    fn add_assign(&mut self, other: &Self) {
        match (self, other) {
            (Grads::Base(a), Grads::Base(b)) => a.add_assign(b),
            (Grads::Adapter(a), Grads::Adapter(b)) => a.add_assign(b),
            _ => unreachable!("gradient kinds never mix"),
        }
    }

    fn scale(&mut self, k: T) {
        match self {
            Grads::Base(p) => p.scale(k),
            Grads::Adapter(a) => a.scale_by(k),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<T>> {
        match self {
            Grads::Base(p) => p.tensors(),
            Grads::Adapter(a) => a.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        match self {
            Grads::Base(p) => p.tensors_mut(),
            Grads::Adapter(a) => a.tensors_mut(),
        }
    }
}

/// One rectified-flow training example: the sequence's target rows hold
/// `x_τ = (1 − τ)·ε + τ·x₀` and `velocity` holds `x₀ − ε`, both in the
/// model's `[-1, 1]` data space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub packed: PackedSequence,
    pub tau: f64,
    pub velocity: Array2<f32>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    /// `x·Aᵀ` for the q, k, v and o adapters.
    lora_mid: Option<[Array2<T>; 4]>,
    ln2: LnCache<T>,
    b: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

struct Cache<T> {
    x: Array2<T>,
    fusion: Option<Array2<T>>,
    targets: Range<usize>,
    timed: Vec<bool>,
    time_lerp: (usize, T),
    cos: Array2<T>,
    sin: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    f: Array2<T>,
}

const LN_EPS: f64 = 1e-5;

fn layer_norm<T: Scalar>(x: &Array2<T>, g: &Array2<T>, b: &Array2<T>) -> (Array2<T>, LnCache<T>) {
    let d = c::<T>(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
        *r = T::one() / (var + c(LN_EPS)).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &g.row(0) + &b.row(0);
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array2<T>,
    grads: Option<(&mut Array2<T>, &mut Array2<T>)>,
) -> Array2<T> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let d = c::<T>(dy.ncols() as f64);
    let mut dx = dy * &g.row(0);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &x| *v = r * (*v - m1 - x * m2));
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Scalar>(u: T) -> T {
    let (half, k, a) = (c::<T>(0.5), c::<T>(GELU_K), c::<T>(0.044715));
    half * u * (T::one() + (k * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let (half, k, a) = (c::<T>(0.5), c::<T>(GELU_K), c::<T>(0.044715));
    let th = (k * (u + a * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * k * (T::one() + c::<T>(3.0) * a * u * u)
}

fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// `x·Wᵀ` plus the adapter term when mounted; returns the adapter's `x·Aᵀ`.
fn project<T: Scalar>(x: &Array2<T>, w: &Array2<T>, lora: Option<(&LoraPair<T>, T)>) -> (Array2<T>, Option<Array2<T>>) {
    let mut y = x.dot(&w.t());
    let mid = lora.map(|(pair, scale)| {
        let mid = x.dot(&pair.a.t());
        y.scaled_add(scale, &mid.dot(&pair.b.t()));
        mid
    });
    (y, mid)
}

/// Backward of [`project`]: returns `dx` and accumulates requested grads.
fn project_back<T: Scalar>(
    dy: &Array2<T>,
    x: &Array2<T>,
    w: &Array2<T>,
    dw: Option<&mut Array2<T>>,
    lora: Option<(&LoraPair<T>, T, &Array2<T>)>,
    dlora: Option<&mut LoraPair<T>>,
) -> Array2<T> {
    let mut dx = dy.dot(w);
    if let Some(dw) = dw {
        *dw += &dy.t().dot(x);
    }
    if let Some((pair, scale, mid)) = lora {
        let dmid = dy.dot(&pair.b) * scale;
        if let Some(g) = dlora {
            g.b.scaled_add(scale, &dy.t().dot(mid));
            g.a += &dmid.t().dot(x);
        }
        dx += &dmid.dot(&pair.a);
    }
    dx
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Self {
        Self {
            rope: RopeTable::new(&config),
            config,
            params,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        ToyModel::from_params(self.config.clone(), self.params.cast())
    }

    /// Forward passes run so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn check_sequence(&self, seq: &PackedSequence) -> Result<()> {
        if seq.len() > self.config.max_tokens {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_tokens,
            });
        }
        if seq.tokens.ncols() != self.config.token_dim() {
            return Err(Error::ShapeMismatch(format!(
                "tokens are {} wide, model expects {}",
                seq.tokens.ncols(),
                self.config.token_dim()
            )));
        }
        if seq.rope.len() != seq.len() {
            return Err(Error::LengthMismatch {
                expected: seq.len(),
                actual: seq.rope.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, seq: &PackedSequence, tau: f64, adapter: Option<&LoraAdapter<T>>) -> Result<(Array2<T>, Cache<T>)> {
        self.check_sequence(seq)?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("noise level {tau} outside [0, 1]")));
        }
        if let Some(a) = adapter {
            a.check(&self.config)?;
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let cfg = &self.config;
        let (dh, heads) = (cfg.head_dim(), cfg.heads);
        let targets = seq.target_range();

        // history rows are pixels in [0, 1]; target rows already hold the state
        let mut x: Array2<T> = seq.tokens.mapv(|v| c(v as f64));
        x.slice_mut(s![..targets.start, ..]).mapv_inplace(|v| v * c(2.0) - T::one());
        let fusion: Option<Array2<T>> = seq.fusion.as_ref().map(|f| f.mapv(|v| c(2.0 * v as f64 - 1.0)));

        let mut h = x.dot(&p.w_in.t()) + &p.b_in.row(0);
        if let Some(f) = &fusion {
            let add = f.dot(&p.w_fuse.t());
            h.slice_mut(s![targets.clone(), ..]).zip_mut_with(&add, |a, &b| *a = *a + b);
        }
        let timed: Vec<bool> = seq
            .roles
            .iter()
            .map(|r| *r == Role::NoisyTarget || (seq.mode == PackMode::Seqconcat && *r == Role::WarpHistory))
            .collect();
        let u = tau * (cfg.time_bins - 1) as f64;
        let i0 = (u.floor() as usize).min(cfg.time_bins - 2);
        let w: T = c(u - i0 as f64);
        let temb = &p.time_table.row(i0) * (T::one() - w) + &p.time_table.row(i0 + 1) * w;
        for (mut row, _) in h.rows_mut().into_iter().zip(&timed).filter(|(_, t)| **t) {
            row += &temb;
        }

        let (cos, sin) = self.rope.angles::<T>(&seq.rope);
        let scale: T = c(1.0 / (dh as f64).sqrt());
        let lscale = adapter.map(|a| c::<T>(a.scale()));
        let mut caches = Vec::with_capacity(cfg.blocks);
        for (bi, bp) in p.blocks.iter().enumerate() {
            let pairs = adapter.map(|a| &a.blocks[bi]);
            let lp = |j: usize| pairs.map(|pp| (&pp[j], lscale.unwrap()));
            let (a, ln1) = layer_norm(&h, &bp.ln1_g, &bp.ln1_b);
            let (mut q, mq) = project(&a, &bp.wq, lp(0));
            let (mut k, mk) = project(&a, &bp.wk, lp(1));
            let (v, mv) = project(&a, &bp.wv, lp(2));
            let mut attn = Array2::zeros(h.raw_dim());
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                rotate_rows(q.slice_mut(cols), &cos, &sin, false);
                rotate_rows(k.slice_mut(cols), &cos, &sin, false);
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut sc);
                attn.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let (o, mo) = project(&attn, &bp.wo, lp(3));
            h += &o;
            let (b, ln2) = layer_norm(&h, &bp.ln2_g, &bp.ln2_b);
            let uu = b.dot(&bp.w1.t()) + &bp.b1.row(0);
            let g = uu.mapv(gelu);
            h += &(g.dot(&bp.w2.t()) + &bp.b2.row(0));
            let lora_mid = match (mq, mk, mv, mo) {
                (Some(a1), Some(a2), Some(a3), Some(a4)) => Some([a1, a2, a3, a4]),
                _ => None,
            };
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                lora_mid,
                ln2,
                b,
                u: uu,
                g,
            });
        }
        let (f, lnf) = layer_norm(&h, &p.lnf_g, &p.lnf_b);
        let mut y = f.dot(&p.w_out.t()) + &p.b_out.row(0);
        let skip = p.out_skip[[i0, 0]] * (T::one() - w) + p.out_skip[[i0 + 1, 0]] * w;
        y.slice_mut(s![targets.clone(), ..]).scaled_add(skip, &x.slice(s![targets.clone(), ..]));
        Ok((
            y,
            Cache {
                x,
                fusion,
                targets,
                timed,
                time_lerp: (i0, w),
                cos,
                sin,
                blocks: caches,
                lnf,
                f,
            },
        ))
    }

    /// Velocity prediction for the target rows of `seq` at noise level `tau`.
    pub fn forward(&self, seq: &PackedSequence, tau: f64, adapter: Option<&LoraAdapter<T>>) -> Result<Array2<T>> {
        let (y, cache) = self.forward_cached(seq, tau, adapter)?;
        Ok(y.slice(s![cache.targets, ..]).to_owned())
    }

    /// Readout for every row, history rows included.
    pub fn readout_all(&self, seq: &PackedSequence, tau: f64, adapter: Option<&LoraAdapter<T>>) -> Result<Array2<T>> {
        Ok(self.forward_cached(seq, tau, adapter)?.0)
    }

    fn backward(&self, cache: &Cache<T>, dy: &Array2<T>, adapter: Option<&LoraAdapter<T>>, target: GradTarget) -> Grads<T> {
        let p = &self.params;
        let cfg = &self.config;
        let (dh, heads) = (cfg.head_dim(), cfg.heads);
        let scale: T = c(1.0 / (dh as f64).sqrt());
        let base = target == GradTarget::Base;
        let mut gp = base.then(|| p.zeros_like());
        let mut gl = match (target, adapter) {
            (GradTarget::Adapter, Some(a)) => Some(a.zeros_like()),
            _ => None,
        };
        let lscale = adapter.map(|a| c::<T>(a.scale()));

        if let Some(g) = gp.as_mut() {
            g.w_out += &dy.t().dot(&cache.f);
            g.b_out += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            let tr = cache.targets.clone();
            let ds = Zip::from(dy.slice(s![tr.clone(), ..]))
                .and(cache.x.slice(s![tr, ..]))
                .fold(T::zero(), |acc, &d, &x| acc + d * x);
            let (i0, w) = cache.time_lerp;
            g.out_skip[[i0, 0]] += ds * (T::one() - w);
            g.out_skip[[i0 + 1, 0]] += ds * w;
        }
        let df = dy.dot(&p.w_out);
        let mut dh_ = layer_norm_back(&df, &cache.lnf, &p.lnf_g, gp.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)));

        for bi in (0..cfg.blocks).rev() {
            let bp = &p.blocks[bi];
            let bc = &cache.blocks[bi];
            let mut gb = gp.as_mut().map(|g| &mut g.blocks[bi]);

            // feed-forward
            if let Some(g) = gb.as_deref_mut() {
                g.w2 += &dh_.t().dot(&bc.g);
                g.b2 += &dh_.sum_axis(Axis(0)).insert_axis(Axis(0));
            }
            let mut du = dh_.dot(&bp.w2);
            Zip::from(&mut du).and(&bc.u).for_each(|d, &u| *d = *d * gelu_grad(u));
            if let Some(g) = gb.as_deref_mut() {
                g.w1 += &du.t().dot(&bc.b);
                g.b1 += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
            }
            let db = du.dot(&bp.w1);
            let ln2g = gb.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b));
            dh_ += &layer_norm_back(&db, &bc.ln2, &bp.ln2_g, ln2g);

            // attention
            let pairs = adapter.map(|a| &a.blocks[bi]);
            let mids = bc.lora_mid.as_ref();
            let lora = |j: usize| pairs.zip(mids).map(|(pp, m)| (&pp[j], lscale.unwrap(), &m[j]));
            let mut gpairs = gl.as_mut().map(|g| &mut g.blocks[bi]);
            let dattn = project_back(
                &dh_,
                &bc.attn,
                &bp.wo,
                gb.as_deref_mut().map(|g| &mut g.wo),
                lora(3),
                gpairs.as_deref_mut().map(|g| &mut g[3]),
            );
            let n = dh_.nrows();
            let mut dq = Array2::zeros((n, cfg.dim));
            let mut dk = Array2::zeros((n, cfg.dim));
            let mut dv = Array2::zeros((n, cfg.dim));
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let pr = &bc.probs[hd];
                let dout = dattn.slice(cols);
                dv.slice_mut(cols).assign(&pr.t().dot(&dout));
                let dp = dout.dot(&bc.v.slice(cols).t());
                let mut ds = &dp * pr;
                let rowsum = ds.sum_axis(Axis(1));
                Zip::from(ds.rows_mut())
                    .and(pr.rows())
                    .and(&rowsum)
                    .for_each(|mut d, pp, &rs| Zip::from(&mut d).and(&pp).for_each(|x, &pv| *x = *x - pv * rs));
                ds.mapv_inplace(|v| v * scale);
                dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
                rotate_rows(dq.slice_mut(cols), &cache.cos, &cache.sin, true);
                rotate_rows(dk.slice_mut(cols), &cache.cos, &cache.sin, true);
            }
            let mut da = project_back(
                &dq,
                &bc.a,
                &bp.wq,
                gb.as_deref_mut().map(|g| &mut g.wq),
                lora(0),
                gpairs.as_deref_mut().map(|g| &mut g[0]),
            );
            da += &project_back(
                &dk,
                &bc.a,
                &bp.wk,
                gb.as_deref_mut().map(|g| &mut g.wk),
                lora(1),
                gpairs.as_deref_mut().map(|g| &mut g[1]),
            );
            da += &project_back(
                &dv,
                &bc.a,
                &bp.wv,
                gb.as_deref_mut().map(|g| &mut g.wv),
                lora(2),
                gpairs.as_deref_mut().map(|g| &mut g[2]),
            );
            let ln1g = gb.map(|g| (&mut g.ln1_g, &mut g.ln1_b));
            dh_ += &layer_norm_back(&da, &bc.ln1, &bp.ln1_g, ln1g);
        }

        if let Some(g) = gp.as_mut() {
            g.w_in += &dh_.t().dot(&cache.x);
            g.b_in += &dh_.sum_axis(Axis(0)).insert_axis(Axis(0));
            if let Some(f) = &cache.fusion {
                g.w_fuse += &dh_.slice(s![cache.targets.clone(), ..]).t().dot(f);
            }
            let (i0, w) = cache.time_lerp;
            let mut dsum = Array1::<T>::zeros(cfg.dim);
            for (row, _) in dh_.rows().into_iter().zip(&cache.timed).filter(|(_, t)| **t) {
                dsum += &row;
            }
            g.time_table.row_mut(i0).scaled_add(T::one() - w, &dsum);
            g.time_table.row_mut(i0 + 1).scaled_add(w, &dsum);
        }
        match (gp, gl) {
            (Some(g), _) => Grads::Base(g),
            (None, Some(l)) => Grads::Adapter(l),
            (None, None) => unreachable!("adapter gradients requested without an adapter"),
        }
    }

    /// Mean squared velocity error over the target rows of one sample.
    pub fn loss(&self, sample: &FlowSample, adapter: Option<&LoraAdapter<T>>) -> Result<f64> {
        let pred = self.forward(&sample.packed, sample.tau, adapter)?;
        Ok(flow_loss(&pred.view(), &sample.velocity))
    }

    /// Batch-mean loss and its gradient. Samples run in parallel; partial
    /// gradients are summed in sample order.
    pub fn loss_and_grads(
        &self,
        samples: &[FlowSample],
        adapter: Option<&LoraAdapter<T>>,
        target: GradTarget,
    ) -> Result<(f64, Grads<T>)> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if target == GradTarget::Adapter && adapter.is_none() {
            return Err(Error::InvalidArgument("adapter gradients need a mounted adapter".into()));
        }
        let parts: Vec<Result<(f64, Grads<T>)>> = samples
            .par_iter()
            .map(|smp| {
                let (y, cache) = self.forward_cached(&smp.packed, smp.tau, adapter)?;
                let tr = cache.targets.clone();
                if smp.velocity.dim() != (tr.len(), y.ncols()) {
                    return Err(Error::ShapeMismatch(format!(
                        "velocity is {:?}, expected ({}, {})",
                        smp.velocity.dim(),
                        tr.len(),
                        y.ncols()
                    )));
                }
                let pred = y.slice(s![tr.clone(), ..]);
                let loss = flow_loss(&pred, &smp.velocity);
                let norm: T = c(2.0 / (pred.len() as f64));
                let mut dy = Array2::<T>::zeros(y.raw_dim());
                Zip::from(dy.slice_mut(s![tr, ..]))
                    .and(&pred)
                    .and(&smp.velocity)
                    .for_each(|d, &p, &v| *d = (p - c(v as f64)) * norm);
                Ok((loss, self.backward(&cache, &dy, adapter, target)))
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Grads<T>> = None;
        for part in parts {
            let (l, g) = part?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.add_assign(&g),
            }
        }
        let mut g = acc.unwrap();
        let inv = 1.0 / samples.len() as f64;
        g.scale(c(inv));
        Ok((total * inv, g))
    }

    /// Euler integration of the predicted velocity from noise (`τ = 0`) to
    /// data (`τ = 1`) in exactly `steps` model evaluations. Returns target
    /// tokens as pixels in `[0, 1]`.
    pub fn sample_chunk(
        &self,
        cond: &PackedSequence,
        steps: usize,
        seed: u64,
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<Array2<f32>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        let mut seq = cond.clone();
        let (n, d) = (seq.target_count(), seq.tokens.ncols());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Array2<f32> = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let dt = 1.0 / steps as f64;
        for i in 0..steps {
            seq.set_targets(&x)?;
            let v = self.forward(&seq, i as f64 * dt, adapter)?;
            Zip::from(&mut x).and(&v).for_each(|a, &b| *a += (dt * b.to_f64().unwrap()) as f32);
        }
        Ok(x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }
}

pub fn flow_loss<T: Scalar>(pred: &ArrayView2<T>, velocity: &Array2<f32>) -> f64 {
    let mut sum = 0.0;
    Zip::from(pred).and(velocity).for_each(|&p, &v| {
        let e = p.to_f64().unwrap() - v as f64;
        sum += e * e;
    });
    sum / pred.len().max(1) as f64
}

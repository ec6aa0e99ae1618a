use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FlowSample, GradTarget, Grads, LoraAdapter, ModelConfig, Scalar, ToyModel};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::pack::{
    corrupt_history, mask_to_support, pack_condition_stream, patchify, CorruptionPolicy, HistoryCorruption,
    PackMode, PackOptions, PackedSequence, Role, TokenGrid,
};
use crate::synth::noise::mix64;
use crate::synth::ClipRecord;
use crate::warp::build_warp_video;

/// Packs a conditioning sequence with placeholder targets.
///
/// `history_times` gives the temporal index of each history frame and
/// `target_offset` the index of the first target; warp frame `j` belongs to
/// target `j`.
pub fn build_condition(
    config: &ModelConfig,
    history: &[Image],
    history_times: &[u32],
    target_offset: u32,
    warp: Option<(&[Image], &[Mask])>,
    n_targets: usize,
    mode: PackMode,
    tau: f64,
) -> Result<PackedSequence> {
    let [ph, pw] = config.patch;
    let [w, h] = config.resolution;
    if history.len() != history_times.len() {
        return Err(Error::LengthMismatch {
            expected: history.len(),
            actual: history_times.len(),
        });
    }
    let clean = if history.is_empty() {
        None
    } else {
        Some(patchify(history, ph, pw)?.with_frame_orders(history_times)?)
    };
    let warp_grid = match warp {
        Some((frames, masks)) if mode.uses_warp() => {
            let support = mask_to_support(masks, ph, pw)?;
            Some(patchify(frames, ph, pw)?.with_support(support)?)
        }
        _ => None,
    };
    let targets = patchify(&vec![Image::new(w, h); n_targets], ph, pw)?;
    pack_condition_stream(
        clean.as_ref(),
        warp_grid.as_ref(),
        &targets,
        mode,
        &PackOptions {
            tau,
            target_offset: Some(target_offset),
        },
    )
}

/// Target tokens of `frames` in the model's `[-1, 1]` data space.
pub fn data_tokens(config: &ModelConfig, frames: &[Image]) -> Result<Array2<f32>> {
    let g: TokenGrid = patchify(frames, config.patch[0], config.patch[1])?;
    Ok(g.tokens.mapv(|v| 2.0 * v - 1.0))
}

/// Rectified-flow state `x_τ = (1 − τ)·ε + τ·x₀` and velocity `x₀ − ε`.
pub fn flow_pair(x0: &Array2<f32>, eps: &Array2<f32>, tau: f64) -> (Array2<f32>, Array2<f32>) {
    let t = tau as f32;
    let mut xt = x0.clone();
    Zip::from(&mut xt).and(eps).for_each(|x, &e| *x = (1.0 - t) * e + t * *x);
    (xt, x0 - eps)
}

/// Noises `x0` to level `tau` with fresh Gaussian noise from `rng`.
pub fn flow_sample(mut cond: PackedSequence, x0: &Array2<f32>, tau: f64, rng: &mut ChaCha8Rng) -> Result<FlowSample> {
    let eps: Array2<f32> = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal));
    let (xt, velocity) = flow_pair(x0, &eps, tau);
    cond.set_targets(&xt)?;
    Ok(FlowSample {
        packed: cond,
        tau,
        velocity,
    })
}

/// Decoupled-weight-decay Adam over a fixed tensor list.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    step: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(tensors: &[&Array2<T>], weight_decay: f64) -> Self {
        let zeros: Vec<Array2<T>> = tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Matrices decay; vectors (biases, norm gains) do not.
    pub fn step(&mut self, params: Vec<&mut Array2<T>>, grads: Vec<&Array2<T>>, lr: f64) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let f = |x: f64| T::from_f64(x).unwrap();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.nrows() > 1 && p.ncols() > 1 { self.weight_decay } else { 0.0 };
            let (fb1, fb2, eps) = (f(b1), f(b2), f(self.eps));
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = fb1 * *m + (T::one() - fb1) * g;
                *v = fb2 * *v + (T::one() - fb2) * g * g;
                let mh = *m / f(c1);
                let vh = *v / f(c2);
                *p = *p - f(lr) * (mh / (vh.sqrt() + eps) + f(decay) * *p);
            });
        }
    }
}

fn clip_global_norm<T: Scalar>(g: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = g
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| {
            let x = v.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::from_f64(max_norm / norm).unwrap();
        g.tensors_mut().into_iter().for_each(|t| t.mapv_inplace(|v| v * k));
    }
    norm
}

/// Linear warmup, then cosine decay to a tenth of the peak.
fn schedule(lr: f64, warmup: usize, iters: usize, i: usize) -> f64 {
    if i < warmup {
        return lr * (i + 1) as f64 / warmup as f64;
    }
    let p = (i - warmup) as f64 / (iters - warmup).max(1) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// History length is drawn from `1..=max_history`.
    pub max_history: usize,
    /// Spacing between history frames is drawn from `1..=max_stride`.
    pub max_stride: usize,
    /// Probability of dropping history frames, and of zeroing patches.
    pub drop_prob: f64,
    pub mask_prob: f64,
    pub max_corruption_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch: 8,
            lr: 2e-3,
            warmup: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            max_history: 4,
            max_stride: 3,
            drop_prob: 0.15,
            mask_prob: 0.3,
            max_corruption_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-mean loss per iteration.
    pub losses: Vec<f64>,
    /// Warp-history tokens seen across all batches.
    pub warp_tokens_seen: usize,
}

impl TrainReport {
    /// Mean loss over the trailing `n` iterations.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.clamp(1, self.losses.len().max(1));
        self.losses[self.losses.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
    }
}

/// One clean-history continuation example drawn from `clip`.
fn continuation_sample(
    config: &ModelConfig,
    clip: &ClipRecord,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FlowSample> {
    let k = config.target_frames;
    let t_len = clip.len();
    if t_len < k + 1 {
        return Err(Error::InvalidArgument(format!("clip of {t_len} frames is shorter than history + chunk")));
    }
    let mut h = rng.random_range(1..=cfg.max_history.min(config.max_history_frames).max(1));
    let mut stride = rng.random_range(1..=cfg.max_stride.max(1));
    while h * stride + k > t_len {
        if stride > 1 {
            stride -= 1;
        } else {
            h -= 1;
        }
    }
    let t0 = rng.random_range(0..=t_len - h * stride - k);
    let hist: Vec<Image> = (0..h).map(|i| clip.frames[t0 + i * stride].clone()).collect();
    let first_target = t0 + h * stride;
    let targets = &clip.frames[first_target..first_target + k];

    let roll: f64 = rng.random();
    let policy = if roll < cfg.drop_prob {
        CorruptionPolicy::DropFrames
    } else if roll < cfg.drop_prob + cfg.mask_prob {
        CorruptionPolicy::MaskPatches
    } else {
        CorruptionPolicy::None
    };
    let corruption = HistoryCorruption {
        policy,
        rate: rng.random_range(0.0..=cfg.max_corruption_rate),
        seed: rng.random(),
    };
    let ch = corrupt_history(&hist, &corruption, config.patch[0], config.patch[1])?;
    let times: Vec<u32> = ch.orders.iter().map(|&o| o * stride as u32).collect();
    let cond = build_condition(config, &ch.frames, &times, (h * stride) as u32, None, k, PackMode::TextOnly, 0.5)?;
    let x0 = data_tokens(config, targets)?;
    flow_sample(cond, &x0, rng.random::<f64>(), rng)
}

/// Rectified-flow pretraining on clean-history continuation.
pub fn train(model: &mut ToyModel<f32>, clips: &[ClipRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one clip".into()));
    }
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("iters and batch must be positive".into()));
    }
    let mut opt = AdamW::new(&model.params.tensors(), cfg.weight_decay);
    let mut report = TrainReport::default();
    for it in 0..cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ mix64(it as u64)));
        let batch = (0..cfg.batch)
            .map(|_| {
                let clip = &clips[rng.random_range(0..clips.len())];
                continuation_sample(&model.config, clip, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        report.warp_tokens_seen += batch
            .iter()
            .map(|s| s.packed.roles.iter().filter(|r| **r == Role::WarpHistory).count())
            .sum::<usize>();
        let (loss, mut grads) = model.loss_and_grads(&batch, None, GradTarget::Base)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = schedule(cfg.lr, cfg.warmup, cfg.iters, it);
        opt.step(model.params.tensors_mut(), grads.tensors(), lr);
        report.losses.push(loss);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Overlapping K-frame windows cut from the source clip.
    pub windows: usize,
    pub window_stride: usize,
    pub tau: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            batch: 2,
            lr: 1e-4,
            warmup: 50,
            grad_clip: 1.0,
            seed: 0,
            windows: 4,
            window_stride: 1,
            tau: crate::pack::DEFAULT_TAU,
        }
    }
}

/// A finetuning example: history frame `start`, targets
/// `start + 1 ..= start + K`, warp of frame `start` into the target cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub cond: PackedSequence,
    pub x0: Array2<f32>,
}

pub fn finetune_windows(config: &ModelConfig, clip: &ClipRecord, cfg: &FinetuneConfig) -> Result<Vec<Window>> {
    let k = config.target_frames;
    let need = (cfg.windows.max(1) - 1) * cfg.window_stride + k + 1;
    if clip.len() < need {
        return Err(Error::InvalidArgument(format!(
            "source clip has {} frames, {} windows need {need}",
            clip.len(),
            cfg.windows
        )));
    }
    (0..cfg.windows.max(1))
        .map(|w| {
            let start = w * cfg.window_stride;
            let targets: Vec<usize> = (start + 1..=start + k).collect();
            let warp = build_warp_video(clip, &clip.trajectory.select(&targets), start)?;
            let (wf, wm) = (warp.images(), warp.masks());
            let cond = build_condition(
                config,
                &clip.frames[start..=start],
                &[0],
                1,
                Some((&wf, &wm)),
                k,
                PackMode::Full,
                cfg.tau,
            )?;
            let frames: Vec<Image> = targets.iter().map(|&i| clip.frames[i].clone()).collect();
            Ok(Window {
                start,
                cond,
                x0: data_tokens(config, &frames)?,
            })
        })
        .collect()
}

/// Trains only the adapter factors on warp-conditioned windows of one clip;
/// the base model is read-only.
pub fn lora_finetune(
    model: &ToyModel<f32>,
    adapter: &mut LoraAdapter<f32>,
    clip: &ClipRecord,
    cfg: &FinetuneConfig,
) -> Result<TrainReport> {
    adapter.check(&model.config)?;
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("iters and batch must be positive".into()));
    }
    let windows = finetune_windows(&model.config, clip, cfg)?;
    let mut opt = AdamW::new(&adapter.tensors(), 0.0);
    let mut report = TrainReport::default();
    for it in 0..cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ mix64(it as u64 ^ 0x10ba)));
        let batch = (0..cfg.batch)
            .map(|_| {
                let w = &windows[rng.random_range(0..windows.len())];
                flow_sample(w.cond.clone(), &w.x0, rng.random::<f64>(), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = model.loss_and_grads(&batch, Some(adapter), GradTarget::Adapter)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = schedule(cfg.lr, cfg.warmup, cfg.iters, it);
        opt.step(adapter.tensors_mut(), grads.tensors(), lr);
        report.losses.push(loss);
    }
    Ok(report)
}

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::{build_condition, ToyModel};
use crate::pack::{sequence_length_report, PackMode, SequenceLengths, DEFAULT_TAU};
use crate::synth::ClipRecord;
use crate::warp::build_warp_video;

pub type TokenCounts = SequenceLengths;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileRegime {
    /// History only; no warp is built.
    Baseline,
    /// Warp conditioning with this share of patches left fully valid.
    Visible(f64),
}

impl ProfileRegime {
    pub fn label(&self) -> String {
        match self {
            Self::Baseline => "baseline".into(),
            Self::Visible(f) => format!("visible_{:.0}", f * 100.0),
        }
    }
}

/// Stage wall-times in seconds and the token budget of one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeProfile {
    pub regime: String,
    /// Kept warp tokens over all warp tokens; 0 for the baseline.
    pub visible_fraction: f64,
    pub warp_s: f64,
    pub pack_s: f64,
    pub transformer_s: f64,
    pub end_to_end_s: f64,
    pub tokens: TokenCounts,
}

/// All-valid masks with `round((1 − fraction)·N)` of the `N` patches over
/// all frames blanked, chosen by a seeded shuffle.
pub fn regime_masks(like: &[Mask], patch: [usize; 2], fraction: f64, seed: u64) -> Result<Vec<Mask>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("visible fraction {fraction} outside [0, 1]")));
    }
    let Some(first) = like.first() else {
        return Ok(Vec::new());
    };
    let (w, h) = first.dims();
    let [ph, pw] = patch;
    let (rows, cols) = (h / ph, w / pw);
    let per = rows * cols;
    let mut ids: Vec<usize> = (0..like.len() * per).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let drop = ((1.0 - fraction) * ids.len() as f64).round() as usize;
    let mut masks = vec![Mask::new(w, h, true); like.len()];
    for &id in &ids[..drop] {
        let (f, p) = (id / per, id % per);
        let (r, c) = (p / cols, p % cols);
        for y in r * ph..(r + 1) * ph {
            for x in c * pw..(c + 1) * pw {
                masks[f].set(x, y, false);
            }
        }
    }
    Ok(masks)
}

/// Times one chunk from frame `source` of `clip` under each regime: warp
/// construction, packing, and sampling with `steps` evaluations.
pub fn profile_chunk(
    model: &ToyModel<f32>,
    clip: &ClipRecord,
    source: usize,
    regimes: &[ProfileRegime],
    steps: usize,
    seed: u64,
) -> Result<Vec<RuntimeProfile>> {
    let cfg = &model.config;
    let k = cfg.target_frames;
    if source + k >= clip.len() {
        return Err(Error::InvalidArgument(format!(
            "clip of {} frames has no {k}-frame chunk after frame {source}",
            clip.len()
        )));
    }
    let targets: Vec<usize> = (source + 1..=source + k).collect();
    regimes
        .iter()
        .map(|regime| {
            let start = Instant::now();
            let (warp, warp_s) = match regime {
                ProfileRegime::Baseline => (None, 0.0),
                ProfileRegime::Visible(f) => {
                    let t = Instant::now();
                    let video = build_warp_video(clip, &clip.trajectory.select(&targets), source)?;
                    let warp_s = t.elapsed().as_secs_f64();
                    let masks = regime_masks(&video.masks(), cfg.patch, *f, seed)?;
                    (Some((video.images(), masks)), warp_s)
                }
            };
            let t = Instant::now();
            let mode = if warp.is_some() { PackMode::Full } else { PackMode::TextOnly };
            let cond = build_condition(
                cfg,
                &clip.frames[source..=source],
                &[0],
                1,
                warp.as_ref().map(|(f, m)| (f.as_slice(), m.as_slice())),
                k,
                mode,
                DEFAULT_TAU,
            )?;
            let pack_s = t.elapsed().as_secs_f64();
            let t = Instant::now();
            model.sample_chunk(&cond, steps, seed, None)?;
            let transformer_s = t.elapsed().as_secs_f64();
            let tokens = sequence_length_report(&cond);
            Ok(RuntimeProfile {
                regime: regime.label(),
                visible_fraction: if warp.is_some() {
                    tokens.warp_history as f64 / (k * cfg.tokens_per_frame()) as f64
                } else {
                    0.0
                },
                warp_s,
                pack_s,
                transformer_s,
                end_to_end_s: start.elapsed().as_secs_f64(),
                tokens,
            })
        })
        .collect()
}

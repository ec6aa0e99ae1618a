//! Token grids, visible-token selection, rotary index assignment and the
//! condition-stream packers.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenCoord {
    pub f: u32,
    pub r: u32,
    pub c: u32,
}

/// Rotary position of a token: temporal, row and column index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct RopeIndex {
    pub t: u32,
    pub r: u32,
    pub c: u32,
}

impl From<[u32; 3]> for RopeIndex {
    fn from([t, r, c]: [u32; 3]) -> Self {
        Self { t, r, c }
    }
}

impl From<RopeIndex> for [u32; 3] {
    fn from(i: RopeIndex) -> Self {
        [i.t, i.r, i.c]
    }
}

/// Patch tokens of a frame stack, one row of `tokens` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub patch: (usize, usize),
    /// Patch rows and columns per frame.
    pub grid: (usize, usize),
    /// Nominal frame count before any selection or dropping.
    pub frames: usize,
    pub tokens: Array2<f32>,
    pub coords: Vec<TokenCoord>,
    pub support: Vec<f64>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.patch.0 * self.patch.1 * 3
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// True when every (f, r, c) slot is present in raster order.
    pub fn is_complete(&self) -> bool {
        self.len() == self.frames * self.tokens_per_frame()
            && self.coords.iter().enumerate().all(|(i, c)| *c == self.raster_coord(i))
    }

    fn raster_coord(&self, i: usize) -> TokenCoord {
        let per = self.tokens_per_frame();
        TokenCoord {
            f: (i / per) as u32,
            r: ((i % per) / self.grid.1) as u32,
            c: (i % self.grid.1) as u32,
        }
    }

    pub fn with_support(mut self, support: Vec<f64>) -> Result<Self> {
        if support.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: support.len(),
            });
        }
        self.support = support;
        Ok(self)
    }

    /// Subset in the given order.
    pub fn take(&self, indices: &[usize]) -> TokenGrid {
        TokenGrid {
            patch: self.patch,
            grid: self.grid,
            frames: self.frames,
            tokens: self.tokens.select(Axis(0), indices),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            support: indices.iter().map(|&i| self.support[i]).collect(),
        }
    }

    /// Replaces the frame order of every token; used when history frames
    /// sit at non-consecutive times.
    pub fn with_frame_orders(mut self, orders: &[u32]) -> Result<Self> {
        if orders.len() != self.frames {
            return Err(Error::LengthMismatch {
                expected: self.frames,
                actual: orders.len(),
            });
        }
        for c in &mut self.coords {
            c.f = orders[c.f as usize];
        }
        Ok(self)
    }
}

fn check_patch(width: usize, height: usize, ph: usize, pw: usize) -> Result<()> {
    if ph == 0 || pw == 0 || height % ph != 0 || width % pw != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{width}x{height} frame is not divisible into {pw}x{ph} patches"
        )));
    }
    Ok(())
}

/// Raster-order patch tokens. Each token holds its patch pixels row by row,
/// RGB interleaved.
pub fn patchify(frames: &[Image], patch_h: usize, patch_w: usize) -> Result<TokenGrid> {
    let (w, h) = frames.first().map(Image::dims).unwrap_or((patch_w, patch_h));
    check_patch(w, h, patch_h, patch_w)?;
    let (rows, cols) = (h / patch_h, w / patch_w);
    let dim = patch_h * patch_w * 3;
    let n = frames.len() * rows * cols;
    let mut tokens = Array2::<f32>::zeros((n, dim));
    let mut coords = Vec::with_capacity(n);
    let mut i = 0;
    for (f, img) in frames.iter().enumerate() {
        if img.dims() != (w, h) {
            return Err(Error::ResolutionMismatch {
                expected: (w, h),
                actual: img.dims(),
            });
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut row = tokens.row_mut(i);
                for py in 0..patch_h {
                    let src = ((r * patch_h + py) * w + c * patch_w) * 3;
                    let dst = py * patch_w * 3;
                    row.slice_mut(s![dst..dst + patch_w * 3])
                        .assign(&ArrayView1::from(&img.data[src..src + patch_w * 3]));
                }
                coords.push(TokenCoord {
                    f: f as u32,
                    r: r as u32,
                    c: c as u32,
                });
                i += 1;
            }
        }
    }
    Ok(TokenGrid {
        patch: (patch_h, patch_w),
        grid: (rows, cols),
        frames: frames.len(),
        tokens,
        coords,
        support: vec![1.0; n],
    })
}

/// Inverse of [`patchify`]. Tokens missing from the grid come back as zeros.
pub fn unpatchify(grid: &TokenGrid) -> Result<Vec<Image>> {
    let (ph, pw) = grid.patch;
    let (w, h) = (grid.grid.1 * pw, grid.grid.0 * ph);
    if grid.tokens.ncols() != grid.token_dim() {
        return Err(Error::ShapeMismatch(format!(
            "token width {} does not match {pw}x{ph} patches",
            grid.tokens.ncols()
        )));
    }
    let mut frames = vec![Image::new(w, h); grid.frames];
    for (i, coord) in grid.coords.iter().enumerate() {
        let img = frames
            .get_mut(coord.f as usize)
            .ok_or_else(|| Error::ShapeMismatch(format!("frame order {} outside grid", coord.f)))?;
        let row = grid.tokens.row(i);
        let (r, c) = (coord.r as usize, coord.c as usize);
        for py in 0..ph {
            let dst = ((r * ph + py) * w + c * pw) * 3;
            for (k, v) in row.slice(s![py * pw * 3..(py + 1) * pw * 3]).iter().enumerate() {
                img.data[dst + k] = *v;
            }
        }
    }
    Ok(frames)
}

/// Fraction of valid pixels under each patch, in raster token order.
pub fn mask_to_support(masks: &[Mask], patch_h: usize, patch_w: usize) -> Result<Vec<f64>> {
    let (w, h) = masks.first().map(Mask::dims).unwrap_or((patch_w, patch_h));
    check_patch(w, h, patch_h, patch_w)?;
    let (rows, cols) = (h / patch_h, w / patch_w);
    let area = (patch_h * patch_w) as f64;
    let mut out = Vec::with_capacity(masks.len() * rows * cols);
    for m in masks {
        if m.dims() != (w, h) {
            return Err(Error::ResolutionMismatch {
                expected: (w, h),
                actual: m.dims(),
            });
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut n = 0usize;
                for py in 0..patch_h {
                    let base = (r * patch_h + py) * w + c * patch_w;
                    n += m.data[base..base + patch_w].iter().filter(|&&v| v).count();
                }
                out.push(n as f64 / area);
            }
        }
    }
    Ok(out)
}

/// Keeps exactly the tokens with `support >= tau`, in order.
pub fn select_visible_tokens(grid: &TokenGrid, tau: f64) -> (TokenGrid, Vec<usize>) {
    let kept: Vec<usize> = (0..grid.len()).filter(|&i| grid.support[i] >= tau).collect();
    (grid.take(&kept), kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    /// `t = offset + f`, a history band before the targets.
    OrdinaryHistory,
    /// `t` equals the target index at the same frame order.
    TargetAligned,
}

/// Start of each temporal band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeLayout {
    pub history_offset: u32,
    pub target_offset: u32,
}

pub fn assign_rope_indices(grid: &TokenGrid, mode: RopeMode, layout: RopeLayout) -> Vec<RopeIndex> {
    let base = match mode {
        RopeMode::OrdinaryHistory => layout.history_offset,
        RopeMode::TargetAligned => layout.target_offset,
    };
    grid.coords
        .iter()
        .map(|c| RopeIndex {
            t: base + c.f,
            r: c.r,
            c: c.c,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CleanHistory,
    WarpHistory,
    NoisyTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackMode {
    #[default]
    Full,
    Noalign,
    Novisdrop,
    Seqconcat,
    Chfusion,
    TextOnly,
}

impl PackMode {
    pub const ALL: [PackMode; 6] = [
        PackMode::TextOnly,
        PackMode::Full,
        PackMode::Noalign,
        PackMode::Novisdrop,
        PackMode::Seqconcat,
        PackMode::Chfusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PackMode::Full => "full",
            PackMode::Noalign => "noalign",
            PackMode::Novisdrop => "novisdrop",
            PackMode::Seqconcat => "seqconcat",
            PackMode::Chfusion => "chfusion",
            PackMode::TextOnly => "text_only",
        }
    }

    pub fn uses_warp(self) -> bool {
        self != PackMode::TextOnly
    }

    fn selects(self) -> bool {
        matches!(self, PackMode::Full | PackMode::Noalign)
    }
}

impl fmt::Display for PackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PackMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownKind {
                what: "packing mode",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackOptions {
    /// Minimum valid-pixel support for a warp token to survive selection.
    pub tau: f64,
    /// First target temporal index; `None` places targets right after the
    /// last clean history frame.
    pub target_offset: Option<u32>,
}

impl Default for PackOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            target_offset: None,
        }
    }
}

/// One conditioning sequence: `[clean history | warp history | targets]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub mode: PackMode,
    pub tokens: Array2<f32>,
    pub roles: Vec<Role>,
    pub rope: Vec<RopeIndex>,
    /// Source grid coordinates of every token.
    pub coords: Vec<TokenCoord>,
    /// One entry per warp token before selection.
    pub kept_mask: Vec<bool>,
    /// Warp channels fused onto the targets (channel-fusion mode only),
    /// one row per target token.
    pub fusion: Option<Array2<f32>>,
    pub patch: (usize, usize),
    pub grid: (usize, usize),
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        let first = self.roles.iter().position(|r| *r == Role::NoisyTarget).unwrap_or(self.len());
        first..self.len()
    }

    pub fn target_count(&self) -> usize {
        self.target_range().len()
    }

    /// Width of token `i` as seen by the model.
    pub fn token_dim(&self, i: usize) -> usize {
        let base = self.tokens.ncols();
        match (&self.fusion, self.roles[i]) {
            (Some(f), Role::NoisyTarget) => base + f.ncols(),
            _ => base,
        }
    }

    pub fn token(&self, i: usize) -> Vec<f32> {
        let mut v = self.tokens.row(i).to_vec();
        if let (Some(f), Role::NoisyTarget) = (&self.fusion, self.roles[i]) {
            v.extend(f.row(i - self.target_range().start).iter());
        }
        v
    }

    /// Overwrites the target token contents, e.g. with the next noisy state.
    pub fn set_targets(&mut self, x: &Array2<f32>) -> Result<()> {
        let range = self.target_range();
        if x.dim() != (range.len(), self.tokens.ncols()) {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} target block, got {:?}",
                range.len(),
                self.tokens.ncols(),
                x.dim()
            )));
        }
        self.tokens.slice_mut(s![range, ..]).assign(x);
        Ok(())
    }

    pub fn targets(&self) -> Array2<f32> {
        self.tokens.slice(s![self.target_range(), ..]).to_owned()
    }
}

/// Packs history, warp pseudo-history and noisy targets for one mode.
///
/// Temporal bands: clean history keeps `t = f`; targets start at
/// `target_offset`. Aligned warps share the target band, `noalign` warps
/// take the band just before the (shifted) targets, and `seqconcat` warps
/// take a band after the targets.
pub fn pack_condition_stream(
    clean_history: Option<&TokenGrid>,
    warp: Option<&TokenGrid>,
    targets: &TokenGrid,
    mode: PackMode,
    opts: &PackOptions,
) -> Result<PackedSequence> {
    let dim = targets.token_dim();
    if targets.tokens.ncols() != dim {
        return Err(Error::ShapeMismatch("target tokens do not match their patch size".into()));
    }
    let same_layout = |g: &TokenGrid, what: &str| -> Result<()> {
        if g.patch != targets.patch || g.grid != targets.grid || g.tokens.ncols() != dim {
            return Err(Error::ShapeMismatch(format!("{what} grid does not match the target grid")));
        }
        Ok(())
    };
    if let Some(c) = clean_history {
        same_layout(c, "history")?;
    }
    if !(0.0..=1.0).contains(&opts.tau) {
        return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", opts.tau)));
    }
    let warp = match (mode, warp) {
        (PackMode::TextOnly, Some(_)) => {
            return Err(Error::ModeViolation("text_only packing does not accept a warp".into()))
        }
        (PackMode::TextOnly, None) => None,
        (m, None) => return Err(Error::ModeViolation(format!("{m} packing requires a warp"))),
        (_, Some(w)) => {
            same_layout(w, "warp")?;
            Some(w)
        }
    };
    let aligned = matches!(mode, PackMode::Full | PackMode::Novisdrop | PackMode::Chfusion);
    if let Some(w) = warp {
        if aligned && w.frames > targets.frames {
            return Err(Error::ModeViolation(format!(
                "{} warp frames cannot align with {} target frames",
                w.frames, targets.frames
            )));
        }
        if mode == PackMode::Chfusion && (!w.is_complete() || w.frames != targets.frames || !targets.is_complete()) {
            return Err(Error::ModeViolation(
                "chfusion needs a complete warp grid matching the targets".into(),
            ));
        }
    }

    let clean_end = clean_history
        .and_then(|c| c.coords.iter().map(|k| k.f + 1).max())
        .unwrap_or(0);
    let start = opts.target_offset.unwrap_or(clean_end);
    if start < clean_end {
        return Err(Error::InvalidArgument(format!(
            "target offset {start} overlaps clean history ending at {clean_end}"
        )));
    }
    let warp_frames = warp.map_or(0, |w| w.frames as u32);
    let target_offset = if mode == PackMode::Noalign { start + warp_frames } else { start };
    let layout = |history_offset| RopeLayout {
        history_offset,
        target_offset,
    };

    let mut blocks: Vec<(Role, TokenGrid, Vec<RopeIndex>)> = Vec::new();
    if let Some(c) = clean_history {
        blocks.push((Role::CleanHistory, c.clone(), assign_rope_indices(c, RopeMode::OrdinaryHistory, layout(0))));
    }
    let mut kept_mask = Vec::new();
    let mut fusion = None;
    if let Some(w) = warp {
        let (kept, idx) = if mode.selects() {
            select_visible_tokens(w, opts.tau)
        } else {
            (w.clone(), (0..w.len()).collect())
        };
        kept_mask = vec![false; w.len()];
        idx.iter().for_each(|&i| kept_mask[i] = true);
        match mode {
            PackMode::Chfusion => fusion = Some(w.tokens.clone()),
            PackMode::Noalign => {
                let rope = assign_rope_indices(&kept, RopeMode::OrdinaryHistory, layout(start));
                blocks.push((Role::WarpHistory, kept, rope));
            }
            PackMode::Seqconcat => {
                let band = target_offset + targets.frames as u32;
                let rope = assign_rope_indices(&kept, RopeMode::OrdinaryHistory, layout(band));
                blocks.push((Role::WarpHistory, kept, rope));
            }
            _ => {
                let rope = assign_rope_indices(&kept, RopeMode::TargetAligned, layout(start));
                blocks.push((Role::WarpHistory, kept, rope));
            }
        }
    }
    blocks.push((
        Role::NoisyTarget,
        targets.clone(),
        assign_rope_indices(targets, RopeMode::TargetAligned, layout(start)),
    ));

    let n: usize = blocks.iter().map(|b| b.1.len()).sum();
    let mut tokens = Array2::<f32>::zeros((n, dim));
    let (mut roles, mut rope, mut coords) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut at = 0;
    for (role, g, idx) in blocks {
        tokens.slice_mut(s![at..at + g.len(), ..]).assign(&g.tokens);
        at += g.len();
        roles.extend(std::iter::repeat_n(role, g.len()));
        rope.extend(idx);
        coords.extend(g.coords);
    }
    Ok(PackedSequence {
        mode,
        tokens,
        roles,
        rope,
        coords,
        kept_mask,
        fusion,
        patch: targets.patch,
        grid: targets.grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionPolicy {
    #[default]
    None,
    DropFrames,
    MaskPatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryCorruption {
    pub policy: CorruptionPolicy,
    pub rate: f64,
    pub seed: u64,
}

impl HistoryCorruption {
    pub fn none() -> Self {
        Self {
            policy: CorruptionPolicy::None,
            rate: 0.0,
            seed: 0,
        }
    }
}

/// History frames after corruption, with the original frame order of each
/// surviving frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedHistory {
    pub frames: Vec<Image>,
    pub orders: Vec<u32>,
}

/// `drop_frames` removes `⌈rate·T⌉` frames; `mask_patches` zeroes
/// `⌈rate·N⌉` of the `N` patches across the whole history.
pub fn corrupt_history(
    frames: &[Image],
    c: &HistoryCorruption,
    patch_h: usize,
    patch_w: usize,
) -> Result<CorruptedHistory> {
    if !(0.0..=1.0).contains(&c.rate) {
        return Err(Error::InvalidArgument(format!("corruption rate {} outside [0, 1]", c.rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let all: Vec<u32> = (0..frames.len() as u32).collect();
    match c.policy {
        CorruptionPolicy::None => Ok(CorruptedHistory {
            frames: frames.to_vec(),
            orders: all,
        }),
        CorruptionPolicy::DropFrames => {
            let n_drop = ((c.rate * frames.len() as f64).ceil() as usize).min(frames.len());
            let mut drop = vec![false; frames.len()];
            for i in sample(&mut rng, frames.len(), n_drop) {
                drop[i] = true;
            }
            let keep: Vec<usize> = (0..frames.len()).filter(|&i| !drop[i]).collect();
            Ok(CorruptedHistory {
                frames: keep.iter().map(|&i| frames[i].clone()).collect(),
                orders: keep.iter().map(|&i| i as u32).collect(),
            })
        }
        CorruptionPolicy::MaskPatches => {
            let mut grid = patchify(frames, patch_h, patch_w)?;
            let n = grid.len();
            let n_mask = ((c.rate * n as f64).ceil() as usize).min(n);
            for i in sample(&mut rng, n, n_mask) {
                grid.tokens.row_mut(i).fill(0.0);
            }
            Ok(CorruptedHistory {
                frames: unpatchify(&grid)?,
                orders: all,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SequenceLengths {
    pub clean_history: usize,
    pub warp_history: usize,
    pub noisy_target: usize,
    pub total: usize,
}

pub fn sequence_length_report(packed: &PackedSequence) -> SequenceLengths {
    let count = |role| packed.roles.iter().filter(|r| **r == role).count();
    SequenceLengths {
        clean_history: count(Role::CleanHistory),
        warp_history: count(Role::WarpHistory),
        noisy_target: count(Role::NoisyTarget),
        total: packed.len(),
    }
}

pub const PACK_MANIFEST: &str = "packed.json";
pub const PACK_PAYLOAD: &str = "tokens.f32";
const PACK_FORMAT: &str = "wah-packed";
const PACK_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackManifest {
    format: String,
    version: u32,
    patch: [usize; 2],
    grid: [usize; 2],
    token_count: usize,
    token_dim: usize,
    fusion_rows: usize,
    payload: String,
    roles: Vec<Role>,
    rope_index: Vec<RopeIndex>,
    coords: Vec<[u32; 3]>,
    kept_mask: Vec<u8>,
}

impl PackedSequence {
    /// Writes `packed.json` (roles, rotary indices, coordinates, kept mask)
    /// and `tokens.f32` (row-major little-endian payload, fused target
    /// channels appended after the main block). The mode is not part of the
    /// manifest; callers record it alongside.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = PackManifest {
            format: PACK_FORMAT.into(),
            version: PACK_VERSION,
            patch: [self.patch.0, self.patch.1],
            grid: [self.grid.0, self.grid.1],
            token_count: self.len(),
            token_dim: self.tokens.ncols(),
            fusion_rows: self.fusion.as_ref().map_or(0, |f| f.nrows()),
            payload: PACK_PAYLOAD.into(),
            roles: self.roles.clone(),
            rope_index: self.rope.clone(),
            coords: self.coords.iter().map(|c| [c.f, c.r, c.c]).collect(),
            kept_mask: self.kept_mask.iter().map(|&k| k as u8).collect(),
        };
        let mpath = dir.join(PACK_MANIFEST);
        fs::write(&mpath, serde_json::to_string(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PACK_PAYLOAD);
        let mut buf = Vec::with_capacity(4 * (self.tokens.len() + self.fusion.as_ref().map_or(0, |f| f.len())));
        for v in self.tokens.iter().chain(self.fusion.iter().flat_map(|f| f.iter())) {
            buf.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&ppath, e))?;
        }
        fs::write(&ppath, buf).map_err(|e| Error::io(&ppath, e))
    }

    pub fn read(dir: &Path, mode: PackMode) -> Result<PackedSequence> {
        let mpath = dir.join(PACK_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: PackManifest = serde_json::from_str(&text)?;
        if m.format != PACK_FORMAT || m.version != PACK_VERSION {
            return Err(Error::format(&mpath, 0, format!("unsupported packed format {} v{}", m.format, m.version)));
        }
        let n = m.token_count;
        if m.roles.len() != n || m.rope_index.len() != n || m.coords.len() != n {
            return Err(Error::format(&mpath, 0, "per-token lists disagree with token_count"));
        }
        if m.kept_mask.iter().any(|&k| k > 1) {
            return Err(Error::format(&mpath, 0, "kept_mask entries must be 0 or 1"));
        }
        let ppath = dir.join(&m.payload);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected = 4 * (n + m.fusion_rows) * m.token_dim;
        if bytes.len() != expected {
            return Err(Error::format(
                &ppath,
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let split = n * m.token_dim;
        let tokens = Array2::from_shape_vec((n, m.token_dim), vals[..split].to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let fusion = (m.fusion_rows > 0)
            .then(|| Array2::from_shape_vec((m.fusion_rows, m.token_dim), vals[split..].to_vec()))
            .transpose()
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(PackedSequence {
            mode,
            tokens,
            roles: m.roles,
            rope: m.rope_index,
            coords: m.coords.iter().map(|&[f, r, c]| TokenCoord { f, r, c }).collect(),
            kept_mask: m.kept_mask.iter().map(|&k| k == 1).collect(),
            fusion,
            patch: (m.patch[0], m.patch[1]),
            grid: (m.grid[0], m.grid[1]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, k: f32) -> Image {
        let data = (0..w * h * 3).map(|i| (i as f32 * 0.37 + k) % 1.0).collect();
        Image::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn patch_counts_and_round_trip() {
        let frames = vec![ramp(64, 64, 0.1), ramp(64, 64, 0.5)];
        let g = patchify(&frames[..1], 8, 8).unwrap();
        assert_eq!(g.tokens.dim(), (64, 192));
        let g = patchify(&frames, 8, 4).unwrap();
        assert!(g.is_complete());
        assert_eq!(unpatchify(&g).unwrap(), frames);
        assert!(patchify(&frames, 7, 8).is_err());
        let flat = patchify(&[Image::filled(16, 16, [0.3, 0.2, 0.1])], 8, 8).unwrap();
        assert!(flat.tokens.rows().into_iter().all(|r| r == flat.tokens.row(0)));
    }

    #[test]
    fn support_arithmetic() {
        let mut m = Mask::new(16, 8, true);
        assert!(mask_to_support(&[m.clone()], 8, 8).unwrap().iter().all(|&s| s == 1.0));
        for y in 0..4 {
            for x in 0..8 {
                m.set(x, y, false);
            }
        }
        assert_eq!(mask_to_support(&[m], 8, 8).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn selection_edges() {
        let g = patchify(&[ramp(16, 16, 0.0)], 8, 8).unwrap();
        let bad = g.clone().with_support(vec![0.0; 4]).unwrap();
        assert_eq!(select_visible_tokens(&bad, 0.0).1.len(), 4);
        assert_eq!(select_visible_tokens(&bad, 0.5).1.len(), 0);
    }

    #[test]
    fn ordinary_band_precedes_targets() {
        let h = patchify(&vec![ramp(16, 16, 0.2); 4], 8, 8).unwrap();
        let idx = assign_rope_indices(&h, RopeMode::OrdinaryHistory, RopeLayout { history_offset: 0, target_offset: 4 });
        assert!(idx.iter().all(|i| i.t < 4));
        let al = assign_rope_indices(&h, RopeMode::TargetAligned, RopeLayout { history_offset: 0, target_offset: 4 });
        assert!(al.iter().zip(&h.coords).all(|(i, c)| i.t == 4 + c.f));
    }

    #[test]
    fn text_only_and_mode_violations() {
        let frames = vec![ramp(16, 16, 0.2); 3];
        let clean = patchify(&frames[..1], 8, 8).unwrap();
        let t = patchify(&frames, 8, 8).unwrap();
        let p = pack_condition_stream(Some(&clean), None, &t, PackMode::TextOnly, &PackOptions::default()).unwrap();
        assert_eq!(sequence_length_report(&p), SequenceLengths { clean_history: 4, warp_history: 0, noisy_target: 12, total: 16 });
        assert!(pack_condition_stream(Some(&clean), Some(&t), &t, PackMode::TextOnly, &PackOptions::default()).is_err());
        assert!(pack_condition_stream(Some(&clean), None, &t, PackMode::Full, &PackOptions::default()).is_err());
        let (dropped, _) = select_visible_tokens(&t.clone().with_support(vec![0.6; 12]).unwrap(), 0.5);
        let partial = dropped.take(&[0, 1, 2]);
        assert!(pack_condition_stream(None, Some(&partial), &t, PackMode::Chfusion, &PackOptions::default()).is_err());
    }

    #[test]
    fn corruption_contracts() {
        let frames: Vec<Image> = (0..5).map(|i| ramp(16, 16, i as f32 * 0.1)).collect();
        let id = corrupt_history(&frames, &HistoryCorruption::none(), 8, 8).unwrap();
        assert_eq!(id.frames, frames);
        let all = HistoryCorruption { policy: CorruptionPolicy::DropFrames, rate: 1.0, seed: 3 };
        assert!(corrupt_history(&frames, &all, 8, 8).unwrap().frames.is_empty());
        let some = HistoryCorruption { policy: CorruptionPolicy::DropFrames, rate: 0.3, seed: 3 };
        let d = corrupt_history(&frames, &some, 8, 8).unwrap();
        assert_eq!(d.frames.len(), 3);
        assert_eq!(d, corrupt_history(&frames, &some, 8, 8).unwrap());
        for (f, &o) in d.frames.iter().zip(&d.orders) {
            assert_eq!(f, &frames[o as usize]);
        }
        let mp = HistoryCorruption { policy: CorruptionPolicy::MaskPatches, rate: 0.25, seed: 9 };
        let m = corrupt_history(&frames, &mp, 8, 8).unwrap();
        let g = patchify(&m.frames, 8, 8).unwrap();
        let zeros = g.tokens.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeros, 5);
        assert_eq!(m, corrupt_history(&frames, &mp, 8, 8).unwrap());
        assert!(corrupt_history(&frames, &HistoryCorruption { rate: 1.5, ..mp }, 8, 8).is_err());
    }

    #[test]
    fn packed_round_trip() {
        let frames = vec![ramp(16, 8, 0.2), ramp(16, 8, 0.7)];
        let t = patchify(&frames, 8, 8).unwrap();
        let clean = patchify(&frames[..1], 8, 8).unwrap();
        for mode in [PackMode::Full, PackMode::Chfusion] {
            let p = pack_condition_stream(Some(&clean), Some(&t), &t, mode, &PackOptions::default()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            p.write(dir.path()).unwrap();
            assert_eq!(PackedSequence::read(dir.path(), mode).unwrap(), p);
        }
    }
}

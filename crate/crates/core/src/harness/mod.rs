//! Experiment plans, split hygiene and the pretrain / ablation / sweep /
//! profile runs built on them.

mod run;
mod table;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{make_primitive_trajectory, Intrinsics, Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::metrics::PoseSearch;
use crate::model::{FinetuneConfig, ModelConfig, TrainConfig};
use crate::pack::{PackMode, DEFAULT_TAU};
use crate::synth::noise::mix64;
use crate::synth::{generate_scene, make_clip, ClipRecord};

pub use run::{
    adapter_digest, eval_cell, run_ablation, run_finetune, run_oneshot_sweep, run_pretrain, run_profile, score_cell,
    sweep_label, tokens_to_frames, write_loss_csv, CellOutput, PretrainOutcome, ProfileTable, SweepRow, SweepTable, PROFILE_COLUMNS, SWEEP_DOWNSTREAM,
};
pub use table::{median, Metric, ResultRow, ResultTable, RESULT_COLUMNS};

pub const PLAN_VERSION: u32 = 1;

/// Named seed derivation: `seed` mixed with each part in order.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = mix64(seed);
    for p in parts {
        for b in p.bytes() {
            h = mix64(h ^ b as u64);
        }
        h = mix64(h ^ 0xff);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    ZeroShot,
    OneShot,
}

impl Shot {
    pub fn name(self) -> &'static str {
        match self {
            Shot::ZeroShot => "zero_shot",
            Shot::OneShot => "one_shot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub mode: PackMode,
    pub shot: Shot,
}

impl Regime {
    pub fn new(mode: PackMode, shot: Shot) -> Self {
        Self { mode, shot }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.mode.name(), self.shot.name())
    }
}

/// One synthetic clip: a scene seed and a camera path starting at the
/// identity pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub id: String,
    pub scene_seed: u64,
    /// `None` holds the camera still.
    pub kind: Option<TrajectoryKind>,
    /// Total motion over the clip, as for [`make_primitive_trajectory`].
    pub magnitude: f64,
    pub frames: usize,
}

impl ClipSpec {
    pub fn trajectory(&self, resolution: [usize; 2]) -> Result<Trajectory> {
        let k = Intrinsics::default_for(resolution[0], resolution[1]);
        match self.kind {
            Some(kind) => make_primitive_trajectory(kind, self.frames, self.magnitude, k),
            None => Ok(Trajectory::constant(self.frames, k)),
        }
    }

    pub fn build(&self, resolution: [usize; 2]) -> Result<ClipRecord> {
        Ok(make_clip(&generate_scene(self.scene_seed), &self.trajectory(resolution)?))
    }
}

/// Training and held-out clip families. Scene seed ranges are half-open;
/// kinds cycle over the clips of each family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_kinds: Vec<TrajectoryKind>,
    pub train_scene_seeds: [u64; 2],
    pub train_frames: usize,
    pub heldout_kinds: Vec<TrajectoryKind>,
    pub heldout_scene_seeds: [u64; 2],
    /// Per-frame rotation range in degrees for pans, tilts and orbits.
    pub rot_step_deg: [f64; 2],
    /// Per-frame translation range for dollies and trucks.
    pub trans_step: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    /// Visible-patch fractions of the warp-conditioned regimes.
    pub visible: Vec<f64>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub version: u32,
    /// Drives clip magnitudes and per-cell sampling seeds.
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub regimes: Vec<Regime>,
    pub oneshot_source: ClipSpec,
    pub sweep_sources: Vec<ClipSpec>,
    pub sample_steps: usize,
    pub tau: f64,
    pub pose_search: PoseSearch,
    pub profile: ProfileSpec,
    /// Artifacts are written here when set.
    pub output: Option<PathBuf>,
}

fn source(id: &str, scene_seed: u64, kind: Option<TrajectoryKind>, magnitude: f64) -> ClipSpec {
    ClipSpec {
        id: id.into(),
        scene_seed,
        kind,
        magnitude,
        frames: 12,
    }
}

impl ExperimentPlan {
    /// Desk-scale plan: 32×32 frames, 120 training clips of 24 frames over
    /// six kinds, 24 held-out clips over three unseen kinds.
    pub fn desk() -> Self {
        use TrajectoryKind::*;
        let mut regimes: Vec<Regime> = PackMode::ALL.iter().map(|&m| Regime::new(m, Shot::ZeroShot)).collect();
        regimes.extend([PackMode::Full, PackMode::Noalign, PackMode::Novisdrop].map(|m| Regime::new(m, Shot::OneShot)));
        Self {
            version: PLAN_VERSION,
            seed: 0,
            model: ModelConfig::desk(),
            dataset: DatasetSpec {
                train_kinds: vec![PanLeft, TiltUp, DollyIn, DollyOut, TruckLeft, TruckRight],
                train_scene_seeds: [1000, 1120],
                train_frames: 24,
                heldout_kinds: vec![PanRight, TiltDown, Orbit],
                heldout_scene_seeds: [5000, 5024],
                rot_step_deg: [0.9, 2.2],
                trans_step: [0.02, 0.06],
            },
            pretrain: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            lora_rank: 32,
            lora_alpha: 32.0,
            regimes,
            oneshot_source: source("src_pan_left", 9001, Some(PanLeft), 16.0),
            sweep_sources: vec![
                source("src_static", 9000, None, 0.0),
                source("src_pan_left", 9001, Some(PanLeft), 16.0),
                source("src_truck_right", 9002, Some(TruckRight), 0.5),
                source("src_dolly_in", 9003, Some(DollyIn), 0.6),
            ],
            sample_steps: 6,
            tau: DEFAULT_TAU,
            pose_search: PoseSearch::default(),
            profile: ProfileSpec {
                visible: vec![0.86, 0.47],
                repeats: 5,
            },
            output: None,
        }
    }

    /// Seconds-scale plan on 8×8 frames for smoke tests and CI.
    pub fn micro() -> Self {
        use TrajectoryKind::*;
        let mut plan = Self::desk();
        plan.model = ModelConfig {
            resolution: [8, 8],
            ..ModelConfig::micro()
        };
        plan.model.max_tokens = plan.model.default_max_tokens();
        plan.dataset.train_scene_seeds = [1000, 1006];
        plan.dataset.train_frames = 8;
        plan.dataset.heldout_scene_seeds = [5000, 5003];
        plan.pretrain = TrainConfig {
            iters: 20,
            batch: 2,
            warmup: 2,
            max_history: 2,
            ..TrainConfig::default()
        };
        plan.finetune = FinetuneConfig {
            iters: 10,
            batch: 1,
            warmup: 1,
            ..FinetuneConfig::default()
        };
        plan.lora_rank = 2;
        plan.lora_alpha = 2.0;
        plan.regimes = vec![
            Regime::new(PackMode::TextOnly, Shot::ZeroShot),
            Regime::new(PackMode::Full, Shot::ZeroShot),
            Regime::new(PackMode::Full, Shot::OneShot),
        ];
        plan.oneshot_source.frames = 8;
        plan.sweep_sources = vec![
            ClipSpec { frames: 8, ..source("src_static", 9000, None, 0.0) },
            ClipSpec { frames: 8, ..source("src_pan_left", 9001, Some(PanLeft), 8.0) },
        ];
        plan.sample_steps = plan.model.sample_steps;
        plan.profile.repeats = 1;
        plan
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn resolution(&self) -> [usize; 2] {
        self.model.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::InvalidConfig(format!(
                "plan version {} is not supported (expected {PLAN_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        let d = &self.dataset;
        if d.train_kinds.is_empty() || d.heldout_kinds.is_empty() {
            return Err(Error::InvalidConfig("dataset needs training and held-out kinds".into()));
        }
        for (name, [a, b]) in [("train", d.train_scene_seeds), ("held-out", d.heldout_scene_seeds)] {
            if b <= a {
                return Err(Error::InvalidConfig(format!("{name} scene seed range {a}..{b} is empty")));
            }
        }
        for (name, [a, b]) in [("rot_step_deg", d.rot_step_deg), ("trans_step", d.trans_step)] {
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b) {
                return Err(Error::InvalidConfig(format!("{name} range [{a}, {b}] is invalid")));
            }
        }
        let need = self.model.max_history_frames.min(self.pretrain.max_history) * self.pretrain.max_stride
            + self.model.target_frames;
        if d.train_frames < need {
            return Err(Error::InvalidConfig(format!(
                "training clips of {} frames are shorter than the {need} frames a sample may span",
                d.train_frames
            )));
        }
        if self.sample_steps == 0 || self.lora_rank == 0 {
            return Err(Error::InvalidConfig("sample_steps and lora_rank must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        for s in std::iter::once(&self.oneshot_source).chain(&self.sweep_sources) {
            if s.frames < 2 || !s.magnitude.is_finite() {
                return Err(Error::InvalidConfig(format!("source clip `{}` is malformed", s.id)));
            }
        }
        let ids: HashSet<&str> = self.sweep_sources.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.sweep_sources.len() {
            return Err(Error::InvalidConfig("sweep source ids must be unique".into()));
        }
        if self.profile.repeats == 0 || self.profile.visible.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig("profile needs repeats ≥ 1 and fractions in [0, 1]".into()));
        }
        check_split(self)
    }

    fn family(&self, prefix: &str, kinds: &[TrajectoryKind], seeds: [u64; 2], frames: usize) -> Vec<ClipSpec> {
        let d = &self.dataset;
        (seeds[0]..seeds[1])
            .enumerate()
            .map(|(i, scene_seed)| {
                let kind = kinds[i % kinds.len()];
                let id = format!("{prefix}_{i:03}_{}", kind.name());
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["magnitude", &id]));
                let [lo, hi] = if kind.is_rotational() { d.rot_step_deg } else { d.trans_step };
                let step = if hi > lo { rng.random_range(lo..hi) } else { lo };
                ClipSpec {
                    id,
                    scene_seed,
                    kind: Some(kind),
                    magnitude: step * (frames - 1) as f64,
                    frames,
                }
            })
            .collect()
    }

    pub fn train_specs(&self) -> Vec<ClipSpec> {
        let d = &self.dataset;
        self.family("train", &d.train_kinds, d.train_scene_seeds, d.train_frames)
    }

    /// Held-out clips hold one source frame and `K` target frames.
    pub fn heldout_specs(&self) -> Vec<ClipSpec> {
        let d = &self.dataset;
        self.family("heldout", &d.heldout_kinds, d.heldout_scene_seeds, self.model.target_frames + 1)
    }
}

/// Asserts that training clips, one-shot sources and held-out clips share no
/// scene and no id, and that held-out kinds are unseen in training.
pub fn check_split(plan: &ExperimentPlan) -> Result<()> {
    let train = plan.train_specs();
    let heldout = plan.heldout_specs();
    let sources: Vec<&ClipSpec> = std::iter::once(&plan.oneshot_source).chain(&plan.sweep_sources).collect();
    let seeds = |v: &mut dyn Iterator<Item = &ClipSpec>| -> HashSet<u64> { v.map(|c| c.scene_seed).collect() };
    let ids = |v: &mut dyn Iterator<Item = &ClipSpec>| -> HashSet<String> { v.map(|c| c.id.clone()).collect() };
    let (tr_s, ho_s, src_s) = (
        seeds(&mut train.iter()),
        seeds(&mut heldout.iter()),
        seeds(&mut sources.iter().copied()),
    );
    let (tr_i, ho_i, src_i) = (
        ids(&mut train.iter()),
        ids(&mut heldout.iter()),
        ids(&mut sources.iter().copied()),
    );
    let pairs = [("training", "held-out", &tr_s, &ho_s), ("one-shot", "held-out", &src_s, &ho_s), ("one-shot", "training", &src_s, &tr_s)];
    for (a, b, x, y) in pairs {
        if let Some(s) = x.intersection(y).min() {
            return Err(Error::SplitViolation(format!("scene seed {s} is in both the {a} and {b} sets")));
        }
    }
    let id_pairs = [("training", "held-out", &tr_i, &ho_i), ("one-shot", "held-out", &src_i, &ho_i), ("one-shot", "training", &src_i, &tr_i)];
    for (a, b, x, y) in id_pairs {
        if let Some(s) = x.intersection(y).min() {
            return Err(Error::SplitViolation(format!("clip `{s}` is in both the {a} and {b} sets")));
        }
    }
    let d = &plan.dataset;
    if let Some(k) = d.heldout_kinds.iter().find(|k| d.train_kinds.contains(k)) {
        return Err(Error::SplitViolation(format!("held-out kind {} is also a training kind", k.name())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_is_valid_and_round_trips() {
        let plan = ExperimentPlan::desk();
        plan.validate().unwrap();
        let back: ExperimentPlan = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(plan.heldout_specs().len(), 24);
        assert!(plan.heldout_specs().iter().all(|c| c.frames == plan.model.target_frames + 1));
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let plan = ExperimentPlan::desk();
        let mut v: serde_json::Value = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        v["extra"] = 1.into();
        assert!(serde_json::from_value::<ExperimentPlan>(v.clone()).is_err());
        v.as_object_mut().unwrap().remove("extra");
        v["version"] = 99.into();
        let p: ExperimentPlan = serde_json::from_value(v).unwrap();
        assert!(matches!(p.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn split_violations_are_detected() {
        let mut plan = ExperimentPlan::desk();
        plan.oneshot_source.scene_seed = 5003;
        assert!(matches!(check_split(&plan), Err(Error::SplitViolation(_))));
        let mut plan = ExperimentPlan::desk();
        plan.sweep_sources[0].scene_seed = 1010;
        assert!(matches!(check_split(&plan), Err(Error::SplitViolation(_))));
        let mut plan = ExperimentPlan::desk();
        plan.dataset.heldout_scene_seeds = [1100, 1130];
        assert!(matches!(check_split(&plan), Err(Error::SplitViolation(_))));
        let mut plan = ExperimentPlan::desk();
        plan.dataset.heldout_kinds.push(TrajectoryKind::PanLeft);
        assert!(matches!(check_split(&plan), Err(Error::SplitViolation(_))));
    }

    #[test]
    fn derived_seeds_depend_on_every_part() {
        let a = derive_seed(1, &["cell", "full/zero_shot", "c0"]);
        assert_eq!(a, derive_seed(1, &["cell", "full/zero_shot", "c0"]));
        assert_ne!(a, derive_seed(2, &["cell", "full/zero_shot", "c0"]));
        assert_ne!(a, derive_seed(1, &["cell", "noalign/zero_shot", "c0"]));
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }
}

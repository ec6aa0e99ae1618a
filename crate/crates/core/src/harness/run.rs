use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rayon::prelude::*;

use super::table::{median, Metric, ResultRow, ResultTable};
use super::{derive_seed, ClipSpec, ExperimentPlan, Regime, Shot};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{fmt_metric, profile_chunk, score_chunk, MetricsReport, ProfileRegime, RuntimeProfile};
use crate::model::{
    build_condition, lora_finetune, save_adapter, save_model, train, LoraAdapter, ModelConfig, ToyModel, TrainReport,
};
use crate::pack::{patchify, unpatchify, PackMode, PackedSequence};
use crate::synth::ClipRecord;
use crate::warp::{build_warp_video, source_diagnostics, SourceDiagnostics, WarpVideo};

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn build_clips(specs: &[ClipSpec], resolution: [usize; 2]) -> Result<Vec<ClipRecord>> {
    specs.par_iter().map(|s| s.build(resolution)).collect()
}

pub fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn dir_name(label: &str) -> String {
    label.replace('/', "-")
}

pub struct PretrainOutcome {
    pub model: ToyModel<f32>,
    pub report: TrainReport,
}

impl PretrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.report.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last 100 iterations.
    pub fn final_loss(&self) -> f64 {
        self.report.tail_mean(100)
    }
}

/// Trains the backbone on clean-history continuation over the training
/// clips. Fails if any warp token reached the training batches.
pub fn run_pretrain(plan: &ExperimentPlan) -> Result<PretrainOutcome> {
    plan.validate()?;
    let clips = build_clips(&plan.train_specs(), plan.resolution())?;
    let mut model = ToyModel::<f32>::new(plan.model.clone(), plan.pretrain.seed)?;
    let report = train(&mut model, &clips, &plan.pretrain)?;
    if report.warp_tokens_seen != 0 {
        return Err(Error::ModeViolation(format!(
            "pretraining batches held {} warp tokens",
            report.warp_tokens_seen
        )));
    }
    if let Some(out) = &plan.output {
        let dir = out.join("pretrain");
        mkdir(&dir)?;
        save_model(&model, &dir.join("model.wahm"))?;
        write_loss_csv(&dir.join("loss.csv"), &report)?;
    }
    Ok(PretrainOutcome { model, report })
}

/// Trains a fresh adapter on one source clip with the plan's recipe.
pub fn run_finetune(
    plan: &ExperimentPlan,
    model: &ToyModel<f32>,
    source: &ClipSpec,
) -> Result<(LoraAdapter<f32>, TrainReport)> {
    plan.validate()?;
    let [lo, hi] = plan.dataset.heldout_scene_seeds;
    if (lo..hi).contains(&source.scene_seed) {
        return Err(Error::SplitViolation(format!(
            "source clip `{}` uses held-out scene seed {}",
            source.id, source.scene_seed
        )));
    }
    let clip = source.build(plan.resolution())?;
    let mut adapter = LoraAdapter::new(&plan.model, plan.lora_rank, plan.lora_alpha, plan.finetune.seed)?;
    let report = lora_finetune(model, &mut adapter, &clip, &plan.finetune)?;
    if let Some(out) = &plan.output {
        let dir = out.join("oneshot").join(&source.id);
        mkdir(&dir)?;
        save_adapter(&adapter, &dir.join("adapter.wahl"))?;
        write_loss_csv(&dir.join("loss.csv"), &report)?;
    }
    Ok((adapter, report))
}

/// A generated chunk with the conditioning that produced it.
pub struct CellOutput {
    pub frames: Vec<Image>,
    pub warp: WarpVideo,
    pub cond: PackedSequence,
}

pub fn tokens_to_frames(cfg: &ModelConfig, tokens: Array2<f32>) -> Result<Vec<Image>> {
    let [w, h] = cfg.resolution;
    let mut grid = patchify(&vec![Image::new(w, h); cfg.target_frames], cfg.patch[0], cfg.patch[1])?;
    grid.tokens = tokens;
    unpatchify(&grid)
}

fn check_eval_clip(plan: &ExperimentPlan, clip: &ClipRecord) -> Result<()> {
    if clip.len() != plan.model.target_frames + 1 {
        return Err(Error::LengthMismatch {
            expected: plan.model.target_frames + 1,
            actual: clip.len(),
        });
    }
    Ok(())
}

/// Warps frame 0 of `clip` into the cameras of frames `1..=K`, packs it
/// under `mode` and samples the chunk.
pub fn eval_cell(
    plan: &ExperimentPlan,
    model: &ToyModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    mode: PackMode,
    clip: &ClipRecord,
    seed: u64,
) -> Result<CellOutput> {
    check_eval_clip(plan, clip)?;
    let k = plan.model.target_frames;
    let targets: Vec<usize> = (1..=k).collect();
    let warp = build_warp_video(clip, &clip.trajectory.select(&targets), 0)?;
    let (wf, wm) = (warp.images(), warp.masks());
    let cond = build_condition(&plan.model, &clip.frames[..1], &[0], 1, Some((&wf, &wm)), k, mode, plan.tau)?;
    let tokens = model.sample_chunk(&cond, plan.sample_steps, seed, adapter)?;
    Ok(CellOutput {
        frames: tokens_to_frames(&plan.model, tokens)?,
        warp,
        cond,
    })
}

/// Scores a generated chunk against the clip's frames `1..=K`; visible
/// metrics use the warp validity masks.
pub fn score_cell(plan: &ExperimentPlan, clip: &ClipRecord, out: &CellOutput) -> Result<MetricsReport> {
    check_eval_clip(plan, clip)?;
    let scene = clip
        .scene
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pose scoring needs the clip's scene".into()))?;
    let k = plan.model.target_frames;
    let targets: Vec<usize> = (1..=k).collect();
    score_chunk(
        &out.frames,
        &clip.frames[1..],
        &out.warp.masks(),
        scene,
        &clip.trajectory,
        &targets,
        &plan.pose_search,
    )
}

fn write_cell(dir: &Path, out: &CellOutput, report: &MetricsReport) -> Result<()> {
    let frames = dir.join("frames");
    mkdir(&frames)?;
    for (i, f) in out.frames.iter().enumerate() {
        f.write_ppm(&frames.join(format!("{i:03}.ppm")))?;
    }
    out.warp.write(&dir.join("warp"))?;
    out.cond.write(&dir.join("packed"))?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))
}

struct Cell<'a> {
    label: String,
    mode: PackMode,
    adapter: Option<&'a LoraAdapter<f32>>,
    missing: Option<String>,
    artifacts: Option<PathBuf>,
}

/// Runs every cell on a pool of `jobs` threads and audits the evaluation
/// counter: each sampled chunk costs exactly `sample_steps` evaluations.
fn run_cells(
    plan: &ExperimentPlan,
    model: &ToyModel<f32>,
    cells: &[Cell],
    specs: &[ClipSpec],
    clips: &[ClipRecord],
    seed_tag: &str,
    jobs: usize,
) -> Result<ResultTable> {
    let sampled = AtomicUsize::new(0);
    let before = model.evaluations();
    let work: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..clips.len()).map(move |j| (c, j))).collect();
    let rows: Vec<ResultRow> = pool(jobs)?.install(|| {
        work.par_iter()
            .map(|&(c, j)| {
                let cell = &cells[c];
                let (spec, clip) = (&specs[j], &clips[j]);
                let outcome = match &cell.missing {
                    Some(why) => Err(why.clone()),
                    None => {
                        let seed = derive_seed(plan.seed, &[seed_tag, &cell.label, &spec.id]);
                        eval_cell(plan, model, cell.adapter, cell.mode, clip, seed)
                            .and_then(|out| {
                                sampled.fetch_add(1, Ordering::Relaxed);
                                let report = score_cell(plan, clip, &out)?;
                                if let Some(dir) = &cell.artifacts {
                                    write_cell(&dir.join(&spec.id), &out, &report)?;
                                }
                                Ok(report)
                            })
                            .map_err(|e| e.to_string())
                    }
                };
                ResultRow {
                    regime: cell.label.clone(),
                    clip: spec.id.clone(),
                    outcome,
                }
            })
            .collect()
    });
    let sampled = sampled.into_inner();
    let evaluations = model.evaluations() - before;
    if evaluations != (plan.sample_steps * sampled) as u64 {
        return Err(Error::Audit(format!(
            "{evaluations} model evaluations for {sampled} chunks of {} steps",
            plan.sample_steps
        )));
    }
    Ok(ResultTable {
        rows,
        evaluations,
        sampled_chunks: sampled,
    })
}

fn write_table(dir: &Path, table: &ResultTable) -> Result<()> {
    mkdir(dir)?;
    table.write_csv(&dir.join("results.csv"))?;
    table.write_summary_csv(&dir.join("summary.csv"))?;
    table.write_json(&dir.join("results.json"))
}

/// Every planned regime on every held-out clip. One-shot regimes use
/// `adapter`; without one their cells are marked failed.
pub fn run_ablation(
    plan: &ExperimentPlan,
    model: &ToyModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    jobs: usize,
) -> Result<ResultTable> {
    plan.validate()?;
    let specs = plan.heldout_specs();
    let clips = build_clips(&specs, plan.resolution())?;
    let cells: Vec<Cell> = plan
        .regimes
        .iter()
        .map(|r: &Regime| {
            let label = r.label();
            let artifacts = plan.output.as_ref().map(|o| o.join("ablation").join(dir_name(&label)));
            let (adapter, missing) = match (r.shot, adapter) {
                (Shot::ZeroShot, _) => (None, None),
                (Shot::OneShot, Some(a)) => (Some(a), None),
                (Shot::OneShot, None) => (None, Some("no one-shot adapter supplied".to_string())),
            };
            Cell {
                label,
                mode: r.mode,
                adapter,
                missing,
                artifacts,
            }
        })
        .collect();
    let table = run_cells(plan, model, &cells, &specs, &clips, "cell", jobs)?;
    if let Some(out) = &plan.output {
        write_table(&out.join("ablation"), &table)?;
    }
    Ok(table)
}

/// One sweep source: its diagnostics, adapter and downstream metrics.
pub struct SweepRow {
    pub source: String,
    pub diagnostics: Option<SourceDiagnostics>,
    pub adapter: Option<LoraAdapter<f32>>,
    pub error: Option<String>,
}

pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Cells labelled `full/one_shot@<source>`.
    pub cells: ResultTable,
}

pub const SWEEP_DOWNSTREAM: [&str; 6] = [
    "r_err_median",
    "r_err_mean",
    "t_err_median",
    "psnr_median",
    "vis_psnr_median",
    "adapter_digest",
];

pub fn sweep_label(source: &str) -> String {
    format!("full/one_shot@{source}")
}

pub fn adapter_digest(adapter: &LoraAdapter<f32>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for t in adapter.tensors() {
        for v in t.iter() {
            h.write_u32(v.to_bits());
        }
    }
    h.finish()
}

impl SweepTable {
    pub fn median(&self, source: &str, metric: Metric) -> Option<f64> {
        self.cells.median(&sweep_label(source), metric)
    }

    pub fn columns() -> Vec<&'static str> {
        let mut c = vec!["source", "status"];
        c.extend(SourceDiagnostics::COLUMNS);
        c.extend(SWEEP_DOWNSTREAM);
        c.push("error");
        c
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::columns())?;
        for r in &self.rows {
            let label = sweep_label(&r.source);
            let mut rec = vec![r.source.clone(), if r.error.is_none() { "ok" } else { "failed" }.to_string()];
            match &r.diagnostics {
                Some(d) => rec.extend(d.values().iter().map(|v| fmt_metric(Some(*v)))),
                None => rec.extend(std::iter::repeat_n(String::new(), SourceDiagnostics::COLUMNS.len())),
            }
            rec.push(fmt_metric(self.cells.median(&label, Metric::RErr)));
            rec.push(fmt_metric(self.cells.mean(&label, Metric::RErr)));
            rec.push(fmt_metric(self.cells.median(&label, Metric::TErr)));
            rec.push(fmt_metric(self.cells.median(&label, Metric::Psnr)));
            rec.push(fmt_metric(self.cells.median(&label, Metric::VisPsnr)));
            rec.push(r.adapter.as_ref().map(|a| format!("{:016x}", adapter_digest(a))).unwrap_or_default());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One adapter per sweep source under the same recipe, each scored in the
/// full one-shot regime on the held-out clips.
pub fn run_oneshot_sweep(plan: &ExperimentPlan, model: &ToyModel<f32>, jobs: usize) -> Result<SweepTable> {
    plan.validate()?;
    if plan.sweep_sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 2 sources, the plan has {}",
            plan.sweep_sources.len()
        )));
    }
    let specs = plan.heldout_specs();
    let clips = build_clips(&specs, plan.resolution())?;
    let mut rows = Vec::new();
    for source in &plan.sweep_sources {
        let prepared = source.build(plan.resolution()).and_then(|clip| {
            let diag = source_diagnostics(&clip)?;
            let (adapter, _) = run_finetune(plan, model, source)?;
            Ok((diag, adapter))
        });
        rows.push(match prepared {
            Ok((diag, adapter)) => SweepRow {
                source: source.id.clone(),
                diagnostics: Some(diag),
                adapter: Some(adapter),
                error: None,
            },
            Err(e) => SweepRow {
                source: source.id.clone(),
                diagnostics: None,
                adapter: None,
                error: Some(e.to_string()),
            },
        });
    }
    let cells: Vec<Cell> = rows
        .iter()
        .map(|r| {
            let label = sweep_label(&r.source);
            Cell {
                artifacts: plan.output.as_ref().map(|o| o.join("sweep").join(dir_name(&label))),
                label,
                mode: PackMode::Full,
                adapter: r.adapter.as_ref(),
                missing: r.error.clone(),
            }
        })
        .collect();
    let cells = run_cells(plan, model, &cells, &specs, &clips, "sweep", jobs)?;
    let table = SweepTable { rows, cells };
    if let Some(out) = &plan.output {
        let dir = out.join("sweep");
        write_table(&dir, &table.cells)?;
        table.write_csv(&dir.join("sweep.csv"))?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub runs: Vec<Vec<RuntimeProfile>>,
    /// Per-regime median of every stage over the runs.
    pub median: Vec<RuntimeProfile>,
}

pub const PROFILE_COLUMNS: [&str; 11] = [
    "regime",
    "run",
    "visible_fraction",
    "warp_s",
    "pack_s",
    "transformer_s",
    "end_to_end_s",
    "clean_history_tokens",
    "warp_history_tokens",
    "noisy_target_tokens",
    "total_tokens",
];

impl ProfileTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(PROFILE_COLUMNS)?;
        let runs = self.runs.iter().enumerate().map(|(i, r)| (i.to_string(), r));
        for (run, rows) in std::iter::once(("median".to_string(), &self.median)).chain(runs) {
            for p in rows {
                w.write_record([
                    p.regime.clone(),
                    run.clone(),
                    fmt_metric(Some(p.visible_fraction)),
                    fmt_metric(Some(p.warp_s)),
                    fmt_metric(Some(p.pack_s)),
                    fmt_metric(Some(p.transformer_s)),
                    fmt_metric(Some(p.end_to_end_s)),
                    p.tokens.clean_history.to_string(),
                    p.tokens.warp_history.to_string(),
                    p.tokens.noisy_target.to_string(),
                    p.tokens.total.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Times one chunk of the first held-out clip: the history-only baseline
/// against each planned visible fraction, `repeats` times on one thread.
pub fn run_profile(plan: &ExperimentPlan, model: &ToyModel<f32>) -> Result<ProfileTable> {
    plan.validate()?;
    let spec = plan
        .heldout_specs()
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig("no held-out clips".into()))?;
    let clip = spec.build(plan.resolution())?;
    let mut regimes = vec![ProfileRegime::Baseline];
    regimes.extend(plan.profile.visible.iter().map(|&f| ProfileRegime::Visible(f)));
    let seed = derive_seed(plan.seed, &["profile", &spec.id]);
    let runs: Vec<Vec<RuntimeProfile>> = pool(1)?.install(|| {
        (0..plan.profile.repeats)
            .map(|_| profile_chunk(model, &clip, 0, &regimes, plan.sample_steps, seed))
            .collect::<Result<_>>()
    })?;
    let median = (0..regimes.len())
        .map(|i| {
            let stage = |f: fn(&RuntimeProfile) -> f64| median(&runs.iter().map(|r| f(&r[i])).collect::<Vec<_>>()).unwrap();
            RuntimeProfile {
                warp_s: stage(|p| p.warp_s),
                pack_s: stage(|p| p.pack_s),
                transformer_s: stage(|p| p.transformer_s),
                end_to_end_s: stage(|p| p.end_to_end_s),
                ..runs[0][i].clone()
            }
        })
        .collect();
    let table = ProfileTable { runs, median };
    if let Some(out) = &plan.output {
        let dir = out.join("profile");
        mkdir(&dir)?;
        table.write_csv(&dir.join("profile.csv"))?;
    }
    Ok(table)
}

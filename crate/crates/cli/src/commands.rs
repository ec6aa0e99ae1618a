use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use wah_core::camera::{make_primitive_trajectory, parse_trajectory_text, Intrinsics, Trajectory};
use wah_core::harness::{
    derive_seed, run_ablation, run_oneshot_sweep, run_pretrain, run_profile, tokens_to_frames, write_loss_csv,
    ExperimentPlan, Metric,
};
use wah_core::image::Image;
use wah_core::metrics::{score_chunk, write_reports_csv, write_reports_json, PoseSearch};
use wah_core::model::{
    build_condition, load_adapter, load_model, lora_finetune, save_adapter, LoraAdapter, ModelConfig, ToyModel,
};
use wah_core::synth::{generate_scene, make_clip, read_clip, write_clip, ClipRecord};
use wah_core::warp::{build_warp_video, WarpVideo};
use wah_core::{Error, Result};

use crate::svg::{bar_chart, line_chart};
use crate::{
    AblateArgs, Cli, Command, EvalArgs, FinetuneArgs, PackArgs, PretrainArgs, ProfileArgs, ReportArgs, SampleArgs,
    SweepArgs, SynthArgs, WarpArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => synth(seed, a),
        Command::Warp(a) => warp(seed, a),
        Command::Pack(a) => pack(seed, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::Sample(a) => sample(seed, a),
        Command::Eval(a) => eval(seed, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Profile(a) => profile(cli, a),
        Command::Report(a) => report(seed, a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(&path, e))
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    args: &'a T,
}

/// Logs the fully resolved configuration and stores it next to the outputs.
fn log_config<T: Serialize>(command: &str, seed: u64, args: &T, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&Resolved { command, seed, args })? + "\n";
    info!("resolved config:\n{json}");
    mkdir(out)?;
    write_text(&out.join("resolved_config.json"), &json)
}

/// Loads the plan (the desk plan by default), applies `--seed` and points
/// the outputs at `out`. The result is written to `out/plan.json`.
fn resolve_plan(cli: &Cli, path: Option<&PathBuf>, out: &Path, edit: impl FnOnce(&mut ExperimentPlan)) -> Result<ExperimentPlan> {
    let mut plan = match path {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::desk(),
    };
    if let Some(seed) = cli.seed {
        plan.seed = seed;
        plan.pretrain.seed = derive_seed(seed, &["pretrain"]);
        plan.finetune.seed = derive_seed(seed, &["finetune"]);
    }
    plan.output = Some(out.to_path_buf());
    edit(&mut plan);
    plan.validate()?;
    let json = plan.to_json()?;
    info!("resolved plan:\n{json}");
    mkdir(out)?;
    write_text(&out.join("plan.json"), &json)?;
    Ok(plan)
}

fn load_checked_model(path: &Path, plan: &ExperimentPlan) -> Result<ToyModel<f32>> {
    let model: ToyModel<f32> = load_model(path)?;
    if model.config != plan.model {
        return Err(Error::InvalidConfig(format!(
            "{} was trained with a different model config than the plan",
            path.display()
        )));
    }
    Ok(model)
}

fn synth(seed: u64, a: &SynthArgs) -> Result<()> {
    log_config("synth", seed, a, &a.out)?;
    if a.kinds.is_empty() {
        return Err(Error::InvalidArgument("--kinds needs at least one kind".into()));
    }
    let k = Intrinsics::default_for(a.width, a.height);
    k.validate()?;
    for i in 0..a.clips {
        let id = format!("clip_{i:03}");
        let kind = a.kinds[i % a.kinds.len()];
        let magnitude = if kind.is_rotational() { a.rotation } else { a.translation };
        let traj = make_primitive_trajectory(kind, a.frames, magnitude, k)?;
        let scene = generate_scene(derive_seed(seed, &["synth", &id]));
        write_clip(&make_clip(&scene, &traj), &a.out.join(&id))?;
    }
    info!("wrote {} clips to {}", a.clips, a.out.display());
    Ok(())
}

fn following(clip: &ClipRecord, source: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || source + n >= clip.len() {
        return Err(Error::InvalidArgument(format!(
            "clip has {} frames; frames {}..={} after source {source} do not exist",
            clip.len(),
            source + 1,
            source + n
        )));
    }
    Ok((source + 1..=source + n).collect())
}

fn warp(seed: u64, a: &WarpArgs) -> Result<()> {
    log_config("warp", seed, a, &a.out)?;
    let clip = read_clip(&a.clip)?;
    let target: Trajectory = match &a.trajectory {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(&path, e))?;
            let (w, h) = clip.dims();
            parse_trajectory_text(&text, w, h)?
        }
        None => clip.trajectory.select(&following(&clip, a.source, a.frames)?),
    };
    let video = build_warp_video(&clip, &target, a.source)?;
    video.write(&a.out)?;
    info!("wrote {} warped frames to {}", video.len(), a.out.display());
    Ok(())
}

fn pack(seed: u64, a: &PackArgs) -> Result<()> {
    log_config("pack", seed, a, &a.out)?;
    let clip = read_clip(&a.clip)?;
    if a.source >= clip.len() {
        return Err(Error::InvalidArgument(format!("source frame {} outside the clip", a.source)));
    }
    let video = match &a.warp {
        Some(dir) => WarpVideo::read(dir)?,
        None => return Err(Error::InvalidArgument("--warp is required; it also fixes the target count".into())),
    };
    let (w, h) = clip.dims();
    let cfg = ModelConfig {
        resolution: [w, h],
        patch: [a.patch, a.patch],
        ..ModelConfig::desk()
    };
    let (wf, wm) = (video.images(), video.masks());
    let cond = build_condition(
        &cfg,
        &clip.frames[a.source..=a.source],
        &[0],
        1,
        Some((&wf, &wm)),
        video.len(),
        a.mode,
        a.tau,
    )?;
    cond.write(&a.out)?;
    info!("packed {} tokens ({}) into {}", cond.len(), a.mode.name(), a.out.display());
    Ok(())
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let plan = resolve_plan(cli, a.plan.as_ref(), &a.out, |p| {
        if let Some(n) = a.iters {
            p.pretrain.iters = n;
        }
    })?;
    let out = run_pretrain(&plan)?;
    info!(
        "pretrained {} iterations: loss {:.4} -> {:.4} (last-100 mean); checkpoint {}",
        out.report.losses.len(),
        out.initial_loss(),
        out.final_loss(),
        a.out.join("pretrain").join("model.wahm").display()
    );
    Ok(())
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let plan = resolve_plan(cli, a.plan.as_ref(), &a.out, |p| {
        p.lora_rank = a.rank;
        p.lora_alpha = a.alpha;
        p.finetune.iters = a.iters;
    })?;
    let model = load_checked_model(&a.model, &plan)?;
    let clip = match &a.clip {
        Some(dir) => read_clip(dir)?,
        None => plan.oneshot_source.build(plan.resolution())?,
    };
    let mut adapter = LoraAdapter::new(&model.config, plan.lora_rank, plan.lora_alpha, plan.finetune.seed)?;
    let report = lora_finetune(&model, &mut adapter, &clip, &plan.finetune)?;
    save_adapter(&adapter, &a.out.join("adapter.wahl"))?;
    write_loss_csv(&a.out.join("loss.csv"), &report)?;
    info!(
        "adapter trained for {} iterations: loss {:.4} -> {:.4}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.tail_mean(100)
    );
    Ok(())
}

fn clip_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sample(seed: u64, a: &SampleArgs) -> Result<()> {
    log_config("sample", seed, a, &a.out)?;
    let model: ToyModel<f32> = load_model(&a.model)?;
    let adapter: Option<LoraAdapter<f32>> = a.adapter.as_deref().map(load_adapter).transpose()?;
    let clip = read_clip(&a.clip)?;
    let cfg = &model.config;
    let targets = following(&clip, a.source, cfg.target_frames)?;
    let video = build_warp_video(&clip, &clip.trajectory.select(&targets), a.source)?;
    let (wf, wm) = (video.images(), video.masks());
    let cond = build_condition(
        cfg,
        &clip.frames[a.source..=a.source],
        &[0],
        1,
        Some((&wf, &wm)),
        cfg.target_frames,
        a.mode,
        a.tau,
    )?;
    let cell_seed = derive_seed(seed, &["sample", a.mode.name(), &clip_name(&a.clip)]);
    let tokens = model.sample_chunk(&cond, a.steps, cell_seed, adapter.as_ref())?;
    for (i, f) in tokens_to_frames(cfg, tokens)?.iter().enumerate() {
        f.write_ppm(&a.out.join(format!("{i:03}.ppm")))?;
    }
    video.write(&a.out.join("warp"))?;
    cond.write(&a.out.join("packed"))?;
    info!("sampled {} frames with {} evaluations", cfg.target_frames, model.evaluations());
    Ok(())
}

fn read_generated(dir: &Path) -> Result<Vec<Image>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "ppm")
                && p.file_stem().is_some_and(|s| s.to_string_lossy().chars().all(|c| c.is_ascii_digit()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no NNN.ppm frames in {}", dir.display())));
    }
    paths.iter().map(|p| Image::read_ppm(p)).collect()
}

fn eval(seed: u64, a: &EvalArgs) -> Result<()> {
    log_config("eval", seed, a, &a.out)?;
    let generated = read_generated(&a.generated)?;
    let clip = read_clip(&a.clip)?;
    let targets = following(&clip, a.source, generated.len())?;
    let video = build_warp_video(&clip, &clip.trajectory.select(&targets), a.source)?;
    let scene = clip
        .scene
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("the clip manifest carries no scene to score against".into()))?;
    let mut cams = vec![a.source];
    cams.extend(&targets);
    let reference: Vec<Image> = targets.iter().map(|&i| clip.frames[i].clone()).collect();
    let report = score_chunk(
        &generated,
        &reference,
        &video.masks(),
        scene,
        &clip.trajectory.select(&cams),
        &targets,
        &PoseSearch::default(),
    )?;
    let rows = [(clip_name(&a.clip), report)];
    write_reports_csv(&a.out.join("report.csv"), &rows)?;
    write_reports_json(&a.out.join("report.json"), &rows)?;
    let r = &rows[0].1;
    info!("r_err {:.4} deg, t_err {:.4}, psnr {:.2} dB", r.r_err_deg, r.t_err, r.psnr_db);
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let plan = resolve_plan(cli, a.plan.as_ref(), &a.out, |_| {})?;
    let model = load_checked_model(&a.model, &plan)?;
    let adapter: Option<LoraAdapter<f32>> = a.adapter.as_deref().map(load_adapter).transpose()?;
    let table = run_ablation(&plan, &model, adapter.as_ref(), a.jobs)?;
    for row in table.failures() {
        warn!("{} on {} failed: {}", row.regime, row.clip, row.outcome.as_ref().err().unwrap());
    }
    for regime in table.regimes() {
        info!(
            "{regime}: median r_err {} deg, median vis_psnr {} dB",
            fmt(table.median(&regime, Metric::RErr)),
            fmt(table.median(&regime, Metric::VisPsnr))
        );
    }
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let plan = resolve_plan(cli, a.plan.as_ref(), &a.out, |_| {})?;
    let model = load_checked_model(&a.model, &plan)?;
    let table = run_oneshot_sweep(&plan, &model, a.jobs)?;
    for row in &table.rows {
        match &row.error {
            Some(e) => warn!("source {} failed: {e}", row.source),
            None => info!(
                "{}: median r_err {} deg, rot_mean {} deg",
                row.source,
                fmt(table.median(&row.source, Metric::RErr)),
                fmt(row.diagnostics.map(|d| d.rot_mean_deg))
            ),
        }
    }
    Ok(())
}

fn profile(cli: &Cli, a: &ProfileArgs) -> Result<()> {
    let plan = resolve_plan(cli, a.plan.as_ref(), &a.out, |_| {})?;
    let model = load_checked_model(&a.model, &plan)?;
    let table = run_profile(&plan, &model)?;
    for p in &table.median {
        info!(
            "{}: {} tokens, transformer {:.4}s, end-to-end {:.4}s",
            p.regime, p.tokens.total, p.transformer_s, p.end_to_end_s
        );
    }
    Ok(())
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("table has no `{name}` column")))
    }

    fn markdown(&self) -> String {
        let mut s = format!("| {} |\n|{}\n", self.header.join(" | "), "---|".repeat(self.header.len()));
        for r in &self.rows {
            s += &format!("| {} |\n", r.join(" | "));
        }
        s
    }
}

fn bars(t: &Csv, label: &str, value: &str, keep: impl Fn(&[String]) -> bool) -> Result<Vec<(String, f64)>> {
    let (l, v) = (t.col(label)?, t.col(value)?);
    Ok(t.rows
        .iter()
        .filter(|r| keep(r))
        .filter_map(|r| r[v].parse::<f64>().ok().map(|x| (r[l].clone(), x)))
        .collect())
}

fn report(seed: u64, a: &ReportArgs) -> Result<()> {
    log_config("report", seed, a, &a.out)?;
    let mut md = String::from("# Results\n");
    let mut found = 0;
    let mut section = |title: &str, rel: &str| -> Result<Option<Csv>> {
        let path = a.input.join(rel);
        if !path.exists() {
            return Ok(None);
        }
        found += 1;
        let t = Csv::read(&path)?;
        md += &format!("\n## {title}\n\nSource: `{rel}`\n\n");
        if rel.ends_with("loss.csv") {
            md += &format!("{} iterations; see `pretrain_loss.svg`.\n", t.rows.len());
        } else {
            md += &t.markdown();
        }
        Ok(Some(t))
    };
    let mut charts: Vec<(String, String)> = Vec::new();
    if let Some(t) = section("Pretraining loss", "pretrain/loss.csv")? {
        let (i, l) = (t.col("iteration")?, t.col("loss")?);
        let pts: Vec<(f64, f64)> = t
            .rows
            .iter()
            .filter_map(|r| Some((r[i].parse().ok()?, r[l].parse().ok()?)))
            .collect();
        charts.push(("pretrain_loss.svg".into(), line_chart("Pretraining loss", "iteration", "loss", &pts)));
    }
    if let Some(t) = section("Interface ablation (medians and means over clips)", "ablation/summary.csv")? {
        let m = t.col("metric")?;
        for (metric, file, title) in [
            ("r_err_deg", "ablation_r_err.svg", "Median rotation error (deg)"),
            ("vis_psnr_db", "ablation_vis_psnr.svg", "Median visible-region PSNR (dB)"),
        ] {
            let b = bars(&t, "regime", "median", |r| r[m] == metric)?;
            charts.push((file.into(), bar_chart(title, metric, &b)));
        }
    }
    if let Some(t) = section("One-shot source sweep", "sweep/sweep.csv")? {
        let b = bars(&t, "source", "r_err_median", |_| true)?;
        charts.push(("sweep_r_err.svg".into(), bar_chart("Median rotation error by source (deg)", "r_err_median", &b)));
    }
    if let Some(t) = section("Runtime profile", "profile/profile.csv")? {
        let run = t.col("run")?;
        let b = bars(&t, "regime", "transformer_s", |r| r[run] == "median")?;
        charts.push((
            "profile_transformer.svg".into(),
            bar_chart("Median transformer / sampling time (s)", "seconds", &b),
        ));
    }
    if found == 0 {
        return Err(Error::InvalidArgument(format!("no result tables under {}", a.input.display())));
    }
    if !charts.is_empty() {
        md += "\n## Charts\n\n";
    }
    for (file, svg) in &charts {
        write_text(&a.out.join(file), svg)?;
        md += &format!("- `{file}`\n");
    }
    write_text(&a.out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wah_core::harness::ExperimentPlan;

const SUBCOMMANDS: [&str; 11] = [
    "synth", "warp", "pack", "pretrain", "finetune", "sample", "eval", "ablate", "sweep", "profile", "report",
];

fn wah(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wah"))
        .args(args)
        .env("COLUMNS", "100")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = wah(args);
    assert!(
        out.status.success(),
        "wah {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `--help` output with `tests/golden/`. Set `WAH_BLESS=1` to
/// rewrite the files.
#[test]
fn help_matches_golden_files() {
    let mut cases = vec![("help.txt".to_string(), vec!["--help"])];
    for s in SUBCOMMANDS {
        cases.push((format!("help_{s}.txt"), vec![s, "--help"]));
    }
    let bless = std::env::var_os("WAH_BLESS").is_some();
    for (file, args) in cases {
        let out = ok(&args);
        let text = String::from_utf8(out.stdout).unwrap();
        let path = golden_dir().join(&file);
        if bless {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &text).unwrap();
        } else {
            let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(text, want, "help text of {args:?} drifted from {file}");
        }
    }
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(wah(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wah(&["synth"]).status.code(), Some(2));
    assert_eq!(wah(&["pack", "--mode", "sideways", "--clip", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(wah(&["synth", "--kinds", "barrel_roll", "--out", "y"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = wah(&["warp", "--clip", p(&dir.path().join("missing")), "--out", p(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad = dir.path().join("plan.json");
    fs::write(&bad, "{\"version\": 1, \"surprise\": true}").unwrap();
    let out = wah(&["pretrain", "--plan", p(&bad), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_the_requested_clips_with_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clips");
    ok(&["synth", "--clips", "40", "--frames", "33", "-q", "--out", p(&out)]);
    let clips: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(clips.len(), 40);
    let clip = wah_core::synth::read_clip(&out.join("clip_039")).unwrap();
    assert_eq!(clip.len(), 33);
    assert!(clip.validate());
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "synth");
    assert_eq!(cfg["args"]["clips"], 40);
}

#[test]
fn synth_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["synth", "--clips", "2", "--frames", "4", "-q", "--seed", seed, "--out", p(&out)]);
        wah_core::synth::read_clip(&out.join("clip_001")).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    assert_ne!(a.frames, c.frames);
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("packed.json")).unwrap()).unwrap()
}

#[test]
fn noalign_packing_differs_from_full_only_in_temporal_indices() {
    let dir = tempfile::tempdir().unwrap();
    let (clips, warp) = (dir.path().join("clips"), dir.path().join("warp"));
    ok(&["synth", "--clips", "1", "--frames", "12", "--kinds", "pan_left", "-q", "--out", p(&clips)]);
    let clip = clips.join("clip_000");
    ok(&["warp", "--clip", p(&clip), "--frames", "8", "-q", "--out", p(&warp)]);
    let pack = |mode: &str| {
        let out = dir.path().join(mode);
        ok(&["pack", "--clip", p(&clip), "--warp", p(&warp), "--mode", mode, "-q", "--out", p(&out)]);
        (manifest(&out), fs::read(out.join("tokens.f32")).unwrap())
    };
    let (full, full_tokens) = pack("full");
    let (noalign, noalign_tokens) = pack("noalign");
    assert_eq!(full_tokens, noalign_tokens);
    let (fo, no) = (full.as_object().unwrap(), noalign.as_object().unwrap());
    for key in fo.keys().filter(|k| *k != "rope_index") {
        assert_eq!(fo[key], no[key], "{key} differs");
    }
    let (fr, nr) = (fo["rope_index"].as_array().unwrap(), no["rope_index"].as_array().unwrap());
    assert_eq!(fr.len(), nr.len());
    let mut t_differs = 0;
    for (a, b) in fr.iter().zip(nr) {
        assert_eq!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
        t_differs += (a[0] != b[0]) as usize;
    }
    assert!(t_differs > 0);

    let (text, _) = pack("text_only");
    let roles = text["roles"].as_array().unwrap();
    assert!(roles.iter().all(|r| r != "warp"));
}

fn micro_plan(dir: &Path) -> PathBuf {
    let path = dir.join("micro.json");
    ExperimentPlan::micro().save(&path).unwrap();
    path
}

/// Pretrains the micro plan once per test that needs a model.
fn micro_model(dir: &Path, plan: &Path) -> PathBuf {
    let out = dir.join("run");
    ok(&["pretrain", "--plan", p(plan), "-q", "--out", p(&out)]);
    out.join("pretrain/model.wahm")
}

#[test]
fn pipeline_commands_chain_on_the_micro_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = micro_plan(dir.path());
    let model = micro_model(dir.path(), &plan);
    let run = dir.path().join("run");
    let loss = fs::read_to_string(run.join("pretrain/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + ExperimentPlan::micro().pretrain.iters);
    assert!(run.join("plan.json").exists());

    let ft = dir.path().join("ft");
    ok(&["finetune", "--plan", p(&plan), "--model", p(&model), "--rank", "2", "--alpha", "2", "--iters", "5", "-q", "--out", p(&ft)]);
    let adapter = ft.join("adapter.wahl");
    assert!(adapter.exists());
    let resolved = ExperimentPlan::load(&ft.join("plan.json")).unwrap();
    assert_eq!((resolved.lora_rank, resolved.finetune.iters), (2, 5));

    // One held-out style clip at the plan's resolution.
    let clips = dir.path().join("clips");
    ok(&["synth", "--clips", "1", "--frames", "6", "--width", "8", "--height", "8", "--kinds", "pan_right", "-q", "--out", p(&clips)]);
    let clip = clips.join("clip_000");
    let gen = dir.path().join("gen");
    ok(&["sample", "--model", p(&model), "--adapter", p(&adapter), "--clip", p(&clip), "--steps", "3", "-q", "--out", p(&gen)]);
    assert!(gen.join("000.ppm").exists() && gen.join("001.ppm").exists());
    let gen2 = dir.path().join("gen2");
    ok(&["sample", "--model", p(&model), "--adapter", p(&adapter), "--clip", p(&clip), "--steps", "3", "-q", "--out", p(&gen2)]);
    assert_eq!(fs::read(gen.join("001.ppm")).unwrap(), fs::read(gen2.join("001.ppm")).unwrap());

    let ev = dir.path().join("eval");
    ok(&["eval", "--generated", p(&gen), "--clip", p(&clip), "-q", "--out", p(&ev)]);
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(csv.starts_with("clip,r_err_deg,t_err,psnr_db"));

    let res = dir.path().join("res");
    ok(&["ablate", "--plan", p(&plan), "--model", p(&model), "--adapter", p(&adapter), "-q", "--out", p(&res)]);
    ok(&["sweep", "--plan", p(&plan), "--model", p(&model), "-q", "--out", p(&res)]);
    ok(&["profile", "--plan", p(&plan), "--model", p(&model), "-q", "--out", p(&res)]);
    fs::create_dir_all(res.join("pretrain")).unwrap();
    fs::copy(run.join("pretrain/loss.csv"), res.join("pretrain/loss.csv")).unwrap();

    let rep = dir.path().join("report");
    let out = ok(&["report", "--input", p(&res), "-q", "--out", p(&rep)]);
    let md = String::from_utf8(out.stdout).unwrap();
    for section in ["Pretraining loss", "Interface ablation", "One-shot source sweep", "Runtime profile"] {
        assert!(md.contains(section), "report lacks {section}");
    }
    for svg in ["pretrain_loss.svg", "ablation_r_err.svg", "ablation_vis_psnr.svg", "sweep_r_err.svg", "profile_transformer.svg"] {
        let text = fs::read_to_string(rep.join(svg)).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"), "{svg}");
    }
    assert_eq!(fs::read_to_string(rep.join("report.md")).unwrap(), md);
}

#[test]
fn models_must_match_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = micro_plan(dir.path());
    let model = micro_model(dir.path(), &plan);
    // Desk plan (the default) with a micro checkpoint.
    let out = wah(&["ablate", "--model", p(&model), "-q", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model config"));
}

#[test]
fn ablation_output_is_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let plan = micro_plan(dir.path());
    let model = micro_model(dir.path(), &plan);
    let ft = dir.path().join("ft");
    ok(&["finetune", "--plan", p(&plan), "--model", p(&model), "--rank", "2", "--alpha", "2", "--iters", "5", "-q", "--out", p(&ft)]);
    let adapter = ft.join("adapter.wahl");
    let run = |jobs: &str| {
        let out = dir.path().join(format!("jobs{jobs}"));
        ok(&["ablate", "--plan", p(&plan), "--model", p(&model), "--adapter", p(&adapter), "--jobs", jobs, "-q", "--out", p(&out)]);
        ["results.csv", "summary.csv", "results.json"].map(|f| fs::read(out.join("ablation").join(f)).unwrap())
    };
    assert_eq!(run("1"), run("2"));
}

#[test]
fn one_shot_cells_fail_visibly_without_an_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let plan = micro_plan(dir.path());
    let model = micro_model(dir.path(), &plan);
    let out = dir.path().join("abl");
    ok(&["ablate", "--plan", p(&plan), "--model", p(&model), "-q", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("ablation/results.csv")).unwrap();
    let failed: Vec<&str> = csv.lines().filter(|l| l.contains(",failed,")).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|l| l.starts_with("full/one_shot,") && l.contains("no one-shot adapter")));
}

#[test]
fn finetune_accepts_the_default_adapter_shape() {
    let dir = tempfile::tempdir().unwrap();
    let plan = micro_plan(dir.path());
    let model = micro_model(dir.path(), &plan);
    let ft = dir.path().join("ft");
    ok(&["finetune", "--plan", p(&plan), "--model", p(&model), "--rank", "32", "--alpha", "32", "--iters", "1000", "-q", "--out", p(&ft)]);
    let loss = fs::read_to_string(ft.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1001);
    let a: wah_core::model::LoraAdapter<f32> = wah_core::model::load_adapter(&ft.join("adapter.wahl")).unwrap();
    assert_eq!(a.rank, 32);
}

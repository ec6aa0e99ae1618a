use std::fs;
use std::path::Path;

use wah_core::harness::*;
use wah_core::model::save_adapter;
use wah_core::Error;

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn micro_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = ExperimentPlan::micro();
    plan.validate().unwrap();
    plan.output = Some(dir.path().join("a"));

    let pre = run_pretrain(&plan).unwrap();
    assert_eq!(pre.report.losses.len(), plan.pretrain.iters);
    assert_eq!(pre.report.warp_tokens_seen, 0);
    assert!(dir.path().join("a/pretrain/model.wahm").exists());

    let (adapter, rep) = run_finetune(&plan, &pre.model, &plan.oneshot_source).unwrap();
    assert_eq!(rep.losses.len(), plan.finetune.iters);
    save_adapter(&adapter, &dir.path().join("adapter.wahl")).unwrap();

    let a = run_ablation(&plan, &pre.model, Some(&adapter), 1).unwrap();
    let n_clips = (plan.dataset.heldout_scene_seeds[1] - plan.dataset.heldout_scene_seeds[0]) as usize;
    assert_eq!(a.rows.len(), plan.regimes.len() * n_clips);
    assert_eq!(a.failures().count(), 0);
    assert_eq!(a.evaluations, (plan.sample_steps * a.sampled_chunks) as u64);
    assert_eq!(a.sampled_chunks, a.rows.len());

    // Same plan on two threads into a second directory: byte-identical artifacts.
    plan.output = Some(dir.path().join("b"));
    let b = run_ablation(&plan, &pre.model, Some(&adapter), 2).unwrap();
    // Undefined metrics are NaN, so compare the printed form.
    assert_eq!(format!("{:?}", a.rows), format!("{:?}", b.rows));
    assert_eq!(read_tree(&dir.path().join("a/ablation")), read_tree(&dir.path().join("b/ablation")));

    let sweep = run_oneshot_sweep(&plan, &pre.model, 1).unwrap();
    assert_eq!(sweep.rows.len(), plan.sweep_sources.len());
    assert!(sweep.rows.iter().all(|r| r.error.is_none() && r.diagnostics.is_some()));
    let text = fs::read_to_string(dir.path().join("b/sweep/sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), SweepTable::columns().join(","));

    let prof = run_profile(&plan, &pre.model).unwrap();
    assert_eq!(prof.median.len(), 1 + plan.profile.visible.len());
    assert!(prof.median.iter().all(|p| p.transformer_s > 0.0));
    assert!(dir.path().join("b/profile/profile.csv").exists());
}

#[test]
fn one_shot_cells_without_an_adapter_fail_loudly() {
    let plan = ExperimentPlan::micro();
    let model = wah_core::model::ToyModel::<f32>::new(plan.model.clone(), 1).unwrap();
    let t = run_ablation(&plan, &model, None, 1).unwrap();
    let failed: Vec<_> = t.failures().collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r.regime.ends_with("one_shot")));
    assert!(failed[0].outcome.as_ref().unwrap_err().contains("no one-shot adapter"));
}

#[test]
fn leaky_plans_are_refused_before_any_work() {
    let mut plan = ExperimentPlan::micro();
    plan.sweep_sources[0].scene_seed = plan.dataset.train_scene_seeds[0];
    assert!(matches!(plan.validate(), Err(Error::SplitViolation(_))));
    let mut plan = ExperimentPlan::micro();
    plan.dataset.train_kinds.push(plan.dataset.heldout_kinds[0]);
    assert!(matches!(run_pretrain(&plan), Err(Error::SplitViolation(_))));
}

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wah_core::image::{Image, Mask};
use wah_core::pack::{
    mask_to_support, pack_condition_stream, patchify, select_visible_tokens, sequence_length_report, PackMode,
    PackOptions, Role, TokenGrid,
};

fn noise_frames(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<Image> {
    (0..n)
        .map(|_| Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect()
}

fn random_masks(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize, p: f64) -> Vec<Mask> {
    (0..n)
        .map(|_| {
            let mut m = Mask::new(w, h, false);
            m.data.iter_mut().for_each(|v| *v = rng.random_bool(p));
            m
        })
        .collect()
}

struct Case {
    clean: TokenGrid,
    warp: TokenGrid,
    targets: TokenGrid,
}

fn case(seed: u64, frames: usize, w: usize, h: usize, patch: usize, valid_p: f64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = patchify(&noise_frames(&mut rng, 2, w, h), patch, patch).unwrap();
    let wf = noise_frames(&mut rng, frames, w, h);
    let masks = random_masks(&mut rng, frames, w, h, valid_p);
    let support = mask_to_support(&masks, patch, patch).unwrap();
    let warp = patchify(&wf, patch, patch).unwrap().with_support(support).unwrap();
    let targets = patchify(&noise_frames(&mut rng, frames, w, h), patch, patch).unwrap();
    Case { clean, warp, targets }
}

fn warp_rows(p: &wah_core::pack::PackedSequence) -> Vec<usize> {
    (0..p.len()).filter(|&i| p.roles[i] == Role::WarpHistory).collect()
}

#[test]
fn support_matches_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (w, h, ph, pw) = (rng.random_range(1..5) * 4, rng.random_range(1..5) * 2, 2, 4);
        let p: f64 = rng.random();
        let masks = random_masks(&mut rng, 2, w, h, p);
        let s = mask_to_support(&masks, ph, pw).unwrap();
        let mut i = 0;
        for m in &masks {
            for r in 0..h / ph {
                for c in 0..w / pw {
                    let mut n = 0;
                    for y in r * ph..(r + 1) * ph {
                        for x in c * pw..(c + 1) * pw {
                            n += m.get(x, y) as usize;
                        }
                    }
                    assert_eq!(s[i], n as f64 / (ph * pw) as f64);
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn selection_is_exact_thresholding() {
    // exhaustive over every support level of a 2x2 patch and a grid of thresholds
    for seed in 0..20 {
        let c = case(seed, 3, 8, 8, 2, 0.5);
        for k in 0..=20 {
            let tau = k as f64 / 20.0;
            let (g, kept) = select_visible_tokens(&c.warp, tau);
            let expect: Vec<usize> = (0..c.warp.len()).filter(|&i| c.warp.support[i] >= tau).collect();
            assert_eq!(kept, expect);
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(g.len(), kept.len());
        }
    }
}

#[test]
fn lower_visibility_keeps_fewer_tokens() {
    let (hi, lo) = (case(1, 8, 32, 32, 8, 0.86), case(1, 8, 32, 32, 8, 0.47));
    let opts = PackOptions::default();
    let n_hi = select_visible_tokens(&hi.warp, opts.tau).1.len();
    let n_lo = select_visible_tokens(&lo.warp, opts.tau).1.len();
    assert!(n_lo < n_hi, "{n_lo} vs {n_hi}");
    let p_hi = pack_condition_stream(Some(&hi.clean), Some(&hi.warp), &hi.targets, PackMode::Full, &opts).unwrap();
    let p_lo = pack_condition_stream(Some(&lo.clean), Some(&lo.warp), &lo.targets, PackMode::Full, &opts).unwrap();
    assert!(sequence_length_report(&p_lo).total < sequence_length_report(&p_hi).total);
    assert_eq!(sequence_length_report(&p_hi).warp_history, n_hi);
}

#[test]
fn full_boundary_lengths() {
    let mut c = case(4, 3, 16, 16, 4, 1.0);
    let opts = PackOptions::default();
    let p = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Full, &opts).unwrap();
    assert_eq!(p.len(), c.clean.len() + c.warp.len() + c.targets.len());
    c.warp.support.iter_mut().for_each(|s| *s = 0.0);
    let p = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Full, &opts).unwrap();
    assert_eq!(p.len(), c.clean.len() + c.targets.len());
    assert!(p.kept_mask.iter().all(|k| !k));
}

#[test]
fn chfusion_doubles_target_width() {
    let c = case(2, 3, 16, 16, 4, 0.5);
    let p = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Chfusion, &PackOptions::default())
        .unwrap();
    assert_eq!(p.len(), c.clean.len() + c.targets.len());
    for i in 0..p.len() {
        let expect = if p.roles[i] == Role::NoisyTarget { 96 } else { 48 };
        assert_eq!(p.token_dim(i), expect);
    }
    let first = p.target_range().start;
    assert_eq!(&p.token(first)[48..], c.warp.tokens.row(0).as_slice().unwrap());
}

#[test]
fn full_and_noalign_differ_only_in_time() {
    let c = case(8, 4, 16, 16, 4, 0.7);
    let opts = PackOptions::default();
    let full = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Full, &opts).unwrap();
    let noal = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Noalign, &opts).unwrap();
    assert_eq!(full.len(), noal.len());
    assert_eq!(full.roles, noal.roles);
    assert_eq!(full.tokens, noal.tokens);
    assert_eq!(full.kept_mask, noal.kept_mask);
    for i in 0..full.len() {
        let (a, b) = (full.rope[i], noal.rope[i]);
        assert_eq!((a.r, a.c), (b.r, b.c));
    }
    // warp time relative to the target of the same frame order: 0 when
    // aligned, one full warp band earlier otherwise
    let k = c.warp.frames as i64;
    for (p, lag) in [(&full, 0), (&noal, -k)] {
        let t0 = p.rope[p.target_range().start].t as i64;
        for &i in &warp_rows(p) {
            assert_eq!(p.rope[i].t as i64 - (t0 + p.coords[i].f as i64), lag);
        }
    }
    assert!(full.rope != noal.rope);
}

fn alignment_holds(p: &wah_core::pack::PackedSequence) -> bool {
    let targets: HashSet<(u32, u32, u32)> = p
        .target_range()
        .map(|i| (p.rope[i].t, p.rope[i].r, p.rope[i].c))
        .collect();
    warp_rows(p).iter().all(|&i| {
        let r = p.rope[i];
        targets.contains(&(r.t, r.r, r.c)) && (r.r, r.c) == (p.coords[i].r, p.coords[i].c)
    })
}

fn disjoint_time(p: &wah_core::pack::PackedSequence) -> bool {
    let t_targets: HashSet<u32> = p.target_range().map(|i| p.rope[i].t).collect();
    let t_clean: HashSet<u32> = (0..p.len()).filter(|&i| p.roles[i] == Role::CleanHistory).map(|i| p.rope[i].t).collect();
    warp_rows(p).iter().all(|&i| !t_targets.contains(&p.rope[i].t) && !t_clean.contains(&p.rope[i].t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_invariant(seed in 0u64..100_000, frames in 1usize..5, p in 0.0f64..1.0, tau in 0.0f64..1.0) {
        let c = case(seed, frames, 8, 8, 2, p);
        let opts = PackOptions { tau, target_offset: None };
        for mode in [PackMode::Full, PackMode::Novisdrop] {
            let s = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, mode, &opts).unwrap();
            prop_assert!(alignment_holds(&s));
        }
        for mode in [PackMode::Noalign, PackMode::Seqconcat] {
            let s = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, mode, &opts).unwrap();
            prop_assert!(disjoint_time(&s));
        }
    }

    #[test]
    fn targets_once_and_contents_untouched(seed in 0u64..100_000, frames in 1usize..4, p in 0.0f64..1.0) {
        let c = case(seed, frames, 8, 8, 4, p);
        for mode in [PackMode::Full, PackMode::Noalign, PackMode::Novisdrop, PackMode::Seqconcat] {
            let s = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, mode, &PackOptions::default()).unwrap();
            let tr = s.target_range();
            prop_assert_eq!(tr.len(), c.targets.len());
            prop_assert_eq!(s.targets(), c.targets.tokens.clone());
            let kept: Vec<usize> = (0..c.warp.len()).filter(|&i| s.kept_mask[i]).collect();
            for (row, &src) in warp_rows(&s).iter().zip(&kept) {
                prop_assert_eq!(s.tokens.row(*row), c.warp.tokens.row(src));
            }
            prop_assert!((0..c.clean.len()).all(|i| s.tokens.row(i) == c.clean.tokens.row(i)));
        }
    }

    #[test]
    fn kept_sets_nest(seed in 0u64..100_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let c = case(seed, 2, 8, 8, 2, 0.5);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a: HashSet<usize> = select_visible_tokens(&c.warp, lo).1.into_iter().collect();
        let b: HashSet<usize> = select_visible_tokens(&c.warp, hi).1.into_iter().collect();
        prop_assert!(b.is_subset(&a));
    }

    #[test]
    fn report_matches_kept_lists(seed in 0u64..100_000, tau in 0.0f64..1.0) {
        let c = case(seed, 3, 8, 8, 4, 0.6);
        let opts = PackOptions { tau, target_offset: None };
        let s = pack_condition_stream(Some(&c.clean), Some(&c.warp), &c.targets, PackMode::Full, &opts).unwrap();
        let r = sequence_length_report(&s);
        prop_assert_eq!(r.warp_history, select_visible_tokens(&c.warp, tau).1.len());
        prop_assert_eq!(r.warp_history, s.kept_mask.iter().filter(|k| **k).count());
        prop_assert_eq!(r.total, r.clean_history + r.warp_history + r.noisy_target);
        let t = pack_condition_stream(Some(&c.clean), None, &c.targets, PackMode::TextOnly, &opts).unwrap();
        prop_assert_eq!(sequence_length_report(&t).warp_history, 0);
    }
}

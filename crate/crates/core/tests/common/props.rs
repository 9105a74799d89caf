//! Randomized invariant checks, each driven by its own proptest runner so
//! both the property tests and the acceptance report can run them.

use ndarray::{Array2, Array3, ArrayD};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toco_core::backbone::{mean_pairwise_cosine, TokenGrid, Vit, VitConfig};
use toco_core::cam::{compute_cam, token_pseudo_labels, Thresholds, TokenLabel, TokenLabelMap};
use toco_core::ctc::{ctc_loss, ema_update, sample_crops, ContrastBatch, CropConfig, ProjectionHead};
use toco_core::data::gen_shapes_dataset;
use toco_core::metrics::miou;
use toco_core::params::ParamStore;
use toco_core::ptc::{pairwise_relations, ptc_loss, PtcMode};
use toco_core::segmenter::{lr_schedule, par_refine, total_loss, LossWeights, ParConfig, ScheduleConfig};

type Outcome = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn finish(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Outcome {
    r.map_err(|e| e.to_string())
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(lo..hi))
}

fn unit_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = matrix(r, rows, cols, -1.0, 1.0);
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    m
}

fn random_labels(r: &mut ChaCha8Rng, grid: (usize, usize), classes: usize) -> TokenLabelMap {
    TokenLabelMap {
        labels: Array2::from_shape_simple_fn(grid, || match r.gen_range(0..classes + 2) {
            0 => TokenLabel::Background,
            1 => TokenLabel::Uncertain,
            k => TokenLabel::Foreground(k - 2),
        }),
    }
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=4)
}

/// CAM entries lie in [0, 1], absent classes are zero, every non-empty
/// class reaches 1, and scaling a classifier row by k > 0 changes nothing.
pub fn cam_bounds_and_scale(cases: u32) -> Outcome {
    let strat = (grid_strategy(), 1usize..=6, 1usize..=4, any::<u64>(), 1e-3f64..1e3);
    finish(runner(cases).run(&strat, |((h, w), d, c, seed, k)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = TokenGrid::new(matrix(&mut r, h * w, d, -3.0, 3.0), (h, w)).unwrap();
        let wm = matrix(&mut r, c, d, -2.0, 2.0);
        let present: Vec<bool> = (0..c).map(|_| r.gen_bool(0.7)).collect();
        let cam = compute_cam(&f, wm.view(), &present);
        for cls in 0..c {
            let plane = cam.values.index_axis(ndarray::Axis(0), cls);
            if plane.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(fail(format!("class {cls} outside [0,1]")));
            }
            let mx = plane.iter().cloned().fold(0.0, f64::max);
            if !present[cls] && mx != 0.0 {
                return Err(fail(format!("absent class {cls} non-zero")));
            }
            if mx != 0.0 && (mx - 1.0).abs() > 1e-12 {
                return Err(fail(format!("class {cls} max {mx}")));
            }
        }
        let target = r.gen_range(0..c);
        let mut scaled = wm.clone();
        scaled.row_mut(target).mapv_inplace(|v| v * k);
        let again = compute_cam(&f, scaled.view(), &present);
        let dev = (&again.values - &cam.values).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        prop_assert!(dev < 1e-12, "scaling row {} by {} moved the CAM by {}", target, k, dev);
        Ok(())
    }))
}

/// Raising the high threshold never creates foreground; lowering the low
/// threshold never creates background.
pub fn labeling_monotonicity(cases: u32) -> Outcome {
    let strat = (grid_strategy(), 1usize..=3, any::<u64>(), 0.05f64..0.45, 0.5f64..0.9, 0.0f64..1.0);
    finish(runner(cases).run(&strat, |((h, w), c, seed, low, high, t)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = TokenGrid::new(matrix(&mut r, h * w, 4, -1.0, 1.0), (h, w)).unwrap();
        let wm = matrix(&mut r, c, 4, -1.0, 1.0);
        let cam = compute_cam(&f, wm.view(), &vec![true; c]);
        let base = token_pseudo_labels(&cam, Thresholds::new(low, high).unwrap()).unwrap();
        let higher = token_pseudo_labels(&cam, Thresholds::new(low, high + t * (0.99 - high)).unwrap()).unwrap();
        let lower = token_pseudo_labels(&cam, Thresholds::new(low * (1.0 - t).max(0.01), high).unwrap()).unwrap();
        for ((b, hi), lo) in base.labels.iter().zip(&higher.labels).zip(&lower.labels) {
            let fg = |l: &TokenLabel| matches!(l, TokenLabel::Foreground(_));
            prop_assert!(!fg(hi) || fg(b), "raising high made {:?} into {:?}", b, hi);
            prop_assert!(*lo != TokenLabel::Background || *b == TokenLabel::Background, "lowering low made {:?} into BG", b);
        }
        Ok(())
    }))
}

/// Pair masks are symmetric, disjoint, hollow, skip uncertain tokens and
/// match their counts.
pub fn relation_masks(cases: u32) -> Outcome {
    let strat = (grid_strategy(), 1usize..=3, any::<u64>());
    finish(runner(cases).run(&strat, |((h, w), c, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut r, (h, w), c);
        let rel = pairwise_relations(&labels);
        let flat: Vec<TokenLabel> = labels.labels.iter().copied().collect();
        let n = flat.len();
        let (mut np, mut nn) = (0, 0);
        for i in 0..n {
            prop_assert!(!rel.positive[[i, i]] && !rel.negative[[i, i]]);
            for j in 0..n {
                prop_assert_eq!(rel.positive[[i, j]], rel.positive[[j, i]]);
                prop_assert_eq!(rel.negative[[i, j]], rel.negative[[j, i]]);
                prop_assert!(!(rel.positive[[i, j]] && rel.negative[[i, j]]));
                if flat[i] == TokenLabel::Uncertain || flat[j] == TokenLabel::Uncertain {
                    prop_assert!(!rel.positive[[i, j]] && !rel.negative[[i, j]]);
                }
                if i < j {
                    np += usize::from(rel.positive[[i, j]]);
                    nn += usize::from(rel.negative[[i, j]]);
                }
            }
        }
        prop_assert_eq!((np, nn), (rel.n_pos, rel.n_neg));
        Ok(())
    }))
}

/// ABS and RELU losses lie in [0, 2], RAW in [-1, 3] (an anti-parallel
/// positive pair costs 2 there); all three are
/// invariant to positive token scaling and to permuting tokens with labels.
pub fn ptc_bounds_and_symmetry(cases: u32) -> Outcome {
    let strat = (grid_strategy(), 1usize..=6, any::<u64>(), 1e-2f64..1e2);
    finish(runner(cases).run(&strat, |((h, w), d, seed, k)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let f = matrix(&mut r, n, d, -1.0, 1.0);
        let labels = random_labels(&mut r, (h, w), 2);
        let rel = pairwise_relations(&labels);
        let grid = TokenGrid::new(f.clone(), (h, w)).unwrap();

        let mut scaled = f.clone();
        let row = r.gen_range(0..n);
        scaled.row_mut(row).mapv_inplace(|v| v * k);
        let scaled = TokenGrid::new(scaled, (h, w)).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pf = f.select(ndarray::Axis(0), &perm);
        let flat: Vec<TokenLabel> = labels.labels.iter().copied().collect();
        let pl = TokenLabelMap {
            labels: Array2::from_shape_fn((h, w), |(y, x)| flat[perm[y * w + x]]),
        };
        let prel = pairwise_relations(&pl);
        let pgrid = TokenGrid::new(pf, (h, w)).unwrap();

        for (mode, lo, hi) in [(PtcMode::Abs, 0.0, 2.0), (PtcMode::Relu, 0.0, 2.0), (PtcMode::Raw, -1.0, 3.0)] {
            let l = ptc_loss(&grid, &rel, mode);
            prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12, "{:?} loss {}", mode, l);
            let ls = ptc_loss(&scaled, &rel, mode);
            prop_assert!((l - ls).abs() < 1e-10, "{:?} not scale invariant: {} vs {}", mode, l, ls);
            let lp = ptc_loss(&pgrid, &prel, mode);
            prop_assert!((l - lp).abs() < 1e-10, "{:?} not permutation invariant: {} vs {}", mode, l, lp);
        }
        Ok(())
    }))
}

/// The contrast loss is non-negative and decreases as a positive key turns
/// towards the anchor.
pub fn ctc_nonnegative_and_monotone(cases: u32) -> Outcome {
    let strat = (1usize..=8, 1usize..=8, 0usize..=8, any::<u64>(), 0.05f64..2.0, 0.0f64..1e-2, 0.01f64..1.0);
    finish(runner(cases).run(&strat, |(d, np, nn, seed, tau, eps, step)| {
        let d = d.max(2);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = unit_rows(&mut r, 1, d).row(0).to_owned();
        let qp = unit_rows(&mut r, np, d);
        let qn = unit_rows(&mut r, nn, d);
        let batch = ContrastBatch { p: p.clone(), q_pos: qp.clone(), q_neg: qn.clone() };
        let l = ctc_loss(&batch, tau, eps).unwrap();
        prop_assert!(l >= 0.0, "loss {}", l);
        // rotate one positive towards p
        let i = r.gen_range(0..np);
        let mut moved = qp.clone();
        let q = moved.row(i).to_owned();
        let target = &q + &(&p * step);
        let target = &target / target.dot(&target).sqrt();
        if target.dot(&p) <= q.dot(&p) + 1e-9 {
            return Ok(());
        }
        moved.row_mut(i).assign(&target);
        let l2 = ctc_loss(&ContrastBatch { p, q_pos: moved, q_neg: qn }, tau, eps).unwrap();
        prop_assert!(l2 <= l + 1e-12, "loss rose from {} to {}", l, l2);
        Ok(())
    }))
}

/// Every attention row of every block sums to one (single precision), and
/// each block keeps one token per patch for any image size.
pub fn attention_rows_normalized(cases: u32) -> Outcome {
    let strat = (1usize..=2, 1usize..=4, 1usize..=4, any::<u64>(), 0.05f32..1.0);
    finish(runner(cases).run(&strat, |(depth, gh, gw, seed, scale)| {
        let cfg = VitConfig {
            image_size: 16,
            patch_size: 4,
            depth,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            aux_block: 1,
            channels: 3,
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let vit = Vit::new(cfg, &mut store, &mut r).unwrap();
        for v in store.values_mut() {
            v.mapv_inplace(|x| x * scale * 50.0);
        }
        let img = Array3::from_shape_simple_fn((3, gh * 4, gw * 4), || r.gen_range(0.0f32..1.0));
        let trace = vit.forward(&store, img.view()).unwrap();
        prop_assert_eq!(trace.tokens.len(), depth);
        for (t, a) in trace.tokens.iter().zip(&trace.attentions) {
            prop_assert_eq!(t.nrows(), gh * gw + 1);
            for row in a.rows() {
                let s: f32 = row.sum();
                prop_assert!((s - 1.0).abs() <= 1e-5, "row sums to {}", s);
            }
        }
        Ok(())
    }))
}

/// `‖θᵍₖ − θˡ‖ = ρᵏ ‖θᵍ₀ − θˡ‖` for a fixed local tensor.
pub fn ema_contraction(cases: u32) -> Outcome {
    let strat = (1usize..=16, any::<u64>(), 0.0f64..=1.0, 0u32..=30);
    finish(runner(cases).run(&strat, |(len, seed, rho, k)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g0 = ArrayD::from_shape_simple_fn(vec![len], || r.gen_range(-2.0..2.0));
        let local = ArrayD::from_shape_simple_fn(vec![len], || r.gen_range(-2.0..2.0));
        let mut g = vec![g0.clone()];
        for _ in 0..k {
            ema_update(&mut g, &[&local], rho).unwrap();
        }
        let dist = |a: &ArrayD<f64>| (a - &local).mapv(|v| v * v).sum().sqrt();
        let want = rho.powi(k as i32) * dist(&g0);
        let got = dist(&g[0]);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want), "{} vs {}", got, want);
        Ok(())
    }))
}

/// mIoU is unchanged by reordering pixels and by relabeling classes in
/// predictions and ground truth together; every IoU is in [0, 1].
pub fn miou_permutation_invariance(cases: u32) -> Outcome {
    let strat = (1usize..=4, 1usize..=6, 1usize..=6, any::<u64>());
    finish(runner(cases).run(&strat, |(k, h, w, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let draw = |r: &mut ChaCha8Rng| -> Vec<u8> {
            (0..h * w).map(|_| if r.gen_bool(0.1) { 255 } else { r.gen_range(0..=k as u8) }).collect()
        };
        let (p, g) = (draw(&mut r), draw(&mut r));
        let grid = |v: &[u8]| Array2::from_shape_vec((h, w), v.to_vec()).unwrap();
        let base = miou(&[grid(&p)], &[grid(&g)], k).unwrap();
        for iou in base.per_class_iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(iou));
        }

        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut r);
        let pp: Vec<u8> = order.iter().map(|&i| p[i]).collect();
        let pg: Vec<u8> = order.iter().map(|&i| g[i]).collect();
        let shuffled = miou(&[grid(&pp)], &[grid(&pg)], k).unwrap();
        prop_assert!((shuffled.miou - base.miou).abs() < 1e-12);

        let mut relabel: Vec<u8> = (0..=k as u8).collect();
        relabel.shuffle(&mut r);
        let map = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| if x == 255 { 255 } else { relabel[x as usize] }).collect() };
        let renamed = miou(&[grid(&map(&p))], &[grid(&map(&g))], k).unwrap();
        prop_assert!((renamed.miou - base.miou).abs() < 1e-12, "{} vs {}", renamed.miou, base.miou);
        for c in 0..=k {
            prop_assert_eq!(renamed.per_class_iou[relabel[c] as usize], base.per_class_iou[c]);
        }
        Ok(())
    }))
}

/// Warmup rises monotonically, the schedule is continuous into the decay
/// and non-increasing afterwards, and never leaves `[0, lr_max]`.
pub fn lr_continuity_and_monotonicity(cases: u32) -> Outcome {
    let strat = (1usize..200, 1usize..400, 1e-6f64..1e-2, 0.0f64..1.0, 0.3f64..3.0);
    finish(runner(cases).run(&strat, |(warm, span, lr_max, floor_frac, power)| {
        let cfg = ScheduleConfig {
            lr_max,
            lr_floor: lr_max * floor_frac * 0.1,
            warmup_iters: warm,
            total_iters: warm + span,
            poly_power: power,
        };
        let lr: Vec<f64> = (0..=cfg.total_iters).map(|t| lr_schedule(t, &cfg)).collect();
        for t in 0..cfg.total_iters {
            prop_assert!(lr[t] >= 0.0 && lr[t] <= lr_max * (1.0 + 1e-12));
            if t < warm {
                prop_assert!(lr[t + 1] >= lr[t]);
            } else {
                prop_assert!(lr[t + 1] <= lr[t], "rise at {}", t);
            }
        }
        // the step into the decay is no larger than one warmup increment
        let inc = (lr_max - cfg.lr_floor) / warm as f64;
        prop_assert!((lr[warm] - lr[warm - 1]).abs() <= inc * (1.0 + 1e-9));
        prop_assert!((lr[warm] - lr_max).abs() <= 1e-15);
        prop_assert_eq!(lr[cfg.total_iters], 0.0);
        Ok(())
    }))
}

/// Refinement keeps every pixel's score total.
pub fn par_mass_conservation(cases: u32) -> Outcome {
    let strat = (1usize..=4, 2usize..=12, 2usize..=12, 1usize..=5, any::<u64>(), 0.02f64..1.0);
    finish(runner(cases).run(&strat, |(k, h, w, iters, seed, sigma)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Array3::from_shape_simple_fn((3, h, w), || r.gen_range(0.0..1.0));
        let s = Array3::from_shape_simple_fn((k, h, w), || r.gen_range(0.0..1.0));
        let cfg = ParConfig { iters, sigma_rgb: sigma, dilations: vec![1, 2] };
        let out = par_refine(img.view(), s.view(), &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                let before: f64 = (0..k).map(|c| s[[c, y, x]]).sum();
                let after: f64 = (0..k).map(|c| out[[c, y, x]]).sum();
                prop_assert!((before - after).abs() < 1e-6, "{} vs {}", before, after);
            }
        }
        Ok(())
    }))
}

/// Projected vectors are unit length.
pub fn projection_unit_norm(cases: u32) -> Outcome {
    let strat = (1usize..=8, 1usize..=8, 1usize..=6, 1usize..=4, any::<u64>());
    finish(runner(cases).run(&strat, |(d, hidden, out, rows, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let head = ProjectionHead::new(&mut store, "p", (d, hidden, out), &mut r);
        for v in store.values_mut() {
            v.mapv_inplace(|_| r.gen_range(-1.0..1.0));
        }
        let x = matrix(&mut r, rows, d, -1.0, 1.0);
        let y = head.forward(&store, x.view()).out;
        for row in y.rows() {
            let n = row.dot(&row).sqrt();
            // an exactly zero pre-norm output stays zero
            prop_assert!((n - 1.0).abs() < 1e-5 || n == 0.0, "norm {}", n);
        }
        Ok(())
    }))
}

/// Same seed and labels give the same crops; every crop fits the image and
/// has the configured side.
pub fn crop_determinism(cases: u32) -> Outcome {
    let strat = (1usize..=4, 1usize..=8, any::<u64>(), any::<u64>());
    finish(runner(cases).run(&strat, |(side_tokens, n_crops, seed, label_seed)| {
        let mut lr = ChaCha8Rng::seed_from_u64(label_seed);
        let labels = random_labels(&mut lr, (4, 4), 2);
        let cfg = CropConfig {
            local_size: side_tokens * 8,
            n_crops,
            ..CropConfig::default()
        };
        let a = sample_crops(&labels, (32, 32), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_crops(&labels, (32, 32), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n_crops);
        for c in &a {
            prop_assert!(c.side == cfg.local_size && c.x + c.side <= 32 && c.y + c.side <= 32);
        }
        Ok(())
    }))
}

/// Image-level labels are exactly the classes painted in the mask.
pub fn generator_labels_match_pixels(cases: u32) -> Outcome {
    let strat = (2usize..=6, 0usize..3, any::<u64>());
    finish(runner(cases).run(&strat, |(classes, size_step, seed)| {
        let size = 32 + 16 * size_step;
        let data = gen_shapes_dataset(1, classes, size, seed).unwrap();
        let s = &data.samples[0];
        let mask = s.ground_truth().unwrap().for_evaluation();
        let mut seen = vec![false; classes];
        for &v in mask.iter() {
            prop_assert!(v == 0 || (v as usize) <= classes, "pixel value {}", v);
            if v > 0 {
                seen[v as usize - 1] = true;
            }
        }
        prop_assert_eq!(&seen, &s.image_labels);
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    }))
}

/// `total = cls + aux + λ₁·ptc + λ₂·ctc + λ₃·seg` for any finite parts.
pub fn loss_breakdown_arithmetic(cases: u32) -> Outcome {
    let strat = (proptest::array::uniform5(0.0f64..10.0), proptest::array::uniform3(0.0f64..2.0));
    finish(runner(cases).run(&strat, |(parts, lam)| {
        let w = LossWeights { ptc: lam[0], ctc: lam[1], seg: lam[2] };
        let b = total_loss(parts, w).unwrap();
        let want = parts[0] + parts[1] + lam[0] * parts[2] + lam[1] * parts[3] + lam[2] * parts[4];
        prop_assert!((b.total - want).abs() < 1e-12);
        Ok(())
    }))
}

/// Mean pairwise cosine of any token set is in [-1, 1].
pub fn similarity_bounds(cases: u32) -> Outcome {
    let strat = (1usize..=16, 1usize..=6, any::<u64>());
    finish(runner(cases).run(&strat, |(n, d, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = matrix(&mut r, n, d, -1.0, 1.0);
        let s = mean_pairwise_cosine(t.view());
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s), "{}", s);
        Ok(())
    }))
}

pub type Property = (&'static str, fn(u32) -> Outcome);

pub const ALL: [Property; 15] = [
    ("cam bounds and row-scale invariance", cam_bounds_and_scale),
    ("labeling monotonicity", labeling_monotonicity),
    ("pair relation masks", relation_masks),
    ("ptc bounds, scale and permutation invariance", ptc_bounds_and_symmetry),
    ("ctc non-negative and monotone", ctc_nonnegative_and_monotone),
    ("attention rows sum to one", attention_rows_normalized),
    ("ema contraction", ema_contraction),
    ("miou permutation invariance", miou_permutation_invariance),
    ("lr continuity and monotonicity", lr_continuity_and_monotonicity),
    ("par mass conservation", par_mass_conservation),
    ("projection unit norm", projection_unit_norm),
    ("crop determinism", crop_determinism),
    ("generator labels match pixels", generator_labels_match_pixels),
    ("loss breakdown arithmetic", loss_breakdown_arithmetic),
    ("blockwise similarity bounds", similarity_bounds),
];

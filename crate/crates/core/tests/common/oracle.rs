//! Scalar brute-force re-derivations of the core formulas, written with
//! plain loops over `Vec<f64>` and sharing no code with the library.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use toco_core::backbone::TokenGrid;
use toco_core::cam::{compute_cam, token_pseudo_labels, Thresholds, TokenLabel, TokenLabelMap};
use toco_core::ctc::{ctc_loss, ema_update, ContrastBatch};
use toco_core::metrics::miou;
use toco_core::ptc::{pairwise_relations, ptc_loss, PtcMode};
use toco_core::segmenter::{lr_schedule, ScheduleConfig};

use super::{cos, rng, unit_vec};

/// Label codes: -1 background, -2 uncertain, k ≥ 0 foreground class k.
pub const BG: i32 = -1;
pub const UNC: i32 = -2;

pub fn sim(mode: &str, c: f64) -> f64 {
    match mode {
        "raw" => c,
        "relu" => c.max(0.0),
        "abs" => c.abs(),
        _ => unreachable!(),
    }
}

pub fn ptc_oracle(tokens: &[Vec<f64>], labels: &[i32], mode: &str) -> f64 {
    let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            if labels[i] == UNC || labels[j] == UNC {
                continue;
            }
            let s = sim(mode, cos(&tokens[i], &tokens[j]));
            if labels[i] == labels[j] {
                pos += 1.0 - s;
                np += 1;
            } else {
                neg += s;
                nn += 1;
            }
        }
    }
    let a = if np > 0 { pos / np as f64 } else { 0.0 };
    let b = if nn > 0 { neg / nn as f64 } else { 0.0 };
    a + b
}

pub fn ctc_oracle(p: &[f64], qpos: &[Vec<f64>], qneg: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let negsum: f64 = qneg.iter().map(|q| (dot(p, q) / tau).exp()).sum();
    let mut total = 0.0;
    for q in qpos {
        let e = (dot(p, q) / tau).exp();
        total += -(e / (e + negsum + eps)).ln();
    }
    total / qpos.len() as f64
}

/// `out[c][i]` for tokens `i`, classifier rows `w[c]`.
pub fn cam_oracle(tokens: &[Vec<f64>], w: &[Vec<f64>], present: &[bool]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; tokens.len()]; w.len()];
    for c in 0..w.len() {
        if !present[c] {
            continue;
        }
        let raw: Vec<f64> = tokens
            .iter()
            .map(|t| t.iter().zip(&w[c]).map(|(a, b)| a * b).sum::<f64>().max(0.0))
            .collect();
        let mx = raw.iter().cloned().fold(0.0, f64::max);
        if mx > 0.0 {
            for i in 0..tokens.len() {
                out[c][i] = raw[i] / mx;
            }
        }
    }
    out
}

pub fn label_oracle(cam: &[Vec<f64>], present: &[bool], low: f64, high: f64) -> Vec<i32> {
    let n = cam[0].len();
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..cam.len() {
                if present[c] && best.is_none_or(|(_, s)| cam[c][i] > s) {
                    best = Some((c, cam[c][i]));
                }
            }
            let s = best.map_or(0.0, |b| b.1);
            if s > high {
                best.unwrap().0 as i32
            } else if s < low {
                BG
            } else {
                UNC
            }
        })
        .collect()
}

pub fn lr_oracle(t: usize, lr_max: f64, floor: f64, warm: usize, total: usize, power: f64) -> f64 {
    if t < warm {
        floor + (lr_max - floor) * t as f64 / warm as f64
    } else {
        lr_max * (1.0 - (t - warm) as f64 / (total - warm) as f64).powf(power)
    }
}

/// Returns per-class IoU (None if the union is empty) and their mean.
pub fn miou_oracle(pred: &[u8], gt: &[u8], classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for k in 0..=classes as u8 {
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == 255 {
                continue;
            }
            match (p == k, g == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let u = tp + fp + fnn;
        ious.push((u > 0).then(|| tp as f64 / u as f64));
    }
    let vals: Vec<f64> = ious.iter().flatten().copied().collect();
    let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    (ious, m)
}

pub fn to_label(code: i32) -> TokenLabel {
    match code {
        BG => TokenLabel::Background,
        UNC => TokenLabel::Uncertain,
        k => TokenLabel::Foreground(k as usize),
    }
}

pub fn label_map(codes: &[i32], grid: (usize, usize)) -> TokenLabelMap {
    TokenLabelMap {
        labels: Array2::from_shape_fn(grid, |(y, x)| to_label(codes[y * grid.1 + x])),
    }
}

pub fn grid_of(tokens: &[Vec<f64>], grid: (usize, usize)) -> TokenGrid<f64> {
    let d = tokens[0].len();
    let flat: Vec<f64> = tokens.iter().flatten().copied().collect();
    TokenGrid::new(Array2::from_shape_vec((tokens.len(), d), flat).unwrap(), grid).unwrap()
}

fn random_tokens(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

fn random_grid(r: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let g = (r.gen_range(1..=4), r.gen_range(1..=4));
        if g.0 * g.1 >= 2 {
            return g;
        }
    }
}

/// Runs `cases` random instances per operation (≤ 16 tokens / vectors) and
/// returns the largest absolute deviation from the oracle for each.
pub fn oracle_suite(seed: u64, cases: usize) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst: Vec<(&'static str, f64)> = vec![
        ("ptc_loss raw", 0.0),
        ("ptc_loss relu", 0.0),
        ("ptc_loss abs", 0.0),
        ("ctc_loss", 0.0),
        ("compute_cam", 0.0),
        ("token_pseudo_labels", 0.0),
        ("lr_schedule", 0.0),
        ("ema_update", 0.0),
        ("miou", 0.0),
    ];
    let mut bump = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|w| w.0 == name).unwrap();
        slot.1 = slot.1.max(if e.is_nan() { f64::INFINITY } else { e });
    };
    for _ in 0..cases {
        // PTC
        let grid = random_grid(&mut r);
        let n = grid.0 * grid.1;
        let d = r.gen_range(2..=6);
        let tokens = random_tokens(&mut r, n, d);
        let codes: Vec<i32> = (0..n).map(|_| r.gen_range(-2..3)).collect();
        let rel = pairwise_relations(&label_map(&codes, grid));
        let g = grid_of(&tokens, grid);
        for (name, mode, m) in [
            ("ptc_loss raw", "raw", PtcMode::Raw),
            ("ptc_loss relu", "relu", PtcMode::Relu),
            ("ptc_loss abs", "abs", PtcMode::Abs),
        ] {
            bump(name, (ptc_loss(&g, &rel, m) - ptc_oracle(&tokens, &codes, mode)).abs());
        }

        // CTC
        let dim = r.gen_range(2..=8);
        let np = r.gen_range(1..=8);
        let nn = r.gen_range(0..=8);
        let p = unit_vec(&mut r, dim);
        let qp: Vec<Vec<f64>> = (0..np).map(|_| unit_vec(&mut r, dim)).collect();
        let qn: Vec<Vec<f64>> = (0..nn).map(|_| unit_vec(&mut r, dim)).collect();
        let tau = r.gen_range(0.1..1.0);
        let eps = [0.0, 1e-8, 1e-3][r.gen_range(0..3)];
        let mat = |rows: &[Vec<f64>]| {
            Array2::from_shape_vec((rows.len(), dim), rows.iter().flatten().copied().collect()).unwrap()
        };
        let batch = ContrastBatch {
            p: ndarray::Array1::from(p.clone()),
            q_pos: mat(&qp),
            q_neg: mat(&qn),
        };
        bump("ctc_loss", (ctc_loss(&batch, tau, eps).unwrap() - ctc_oracle(&p, &qp, &qn, tau, eps)).abs());

        // CAM and pseudo labels
        let classes = r.gen_range(1..=4);
        let w: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let present: Vec<bool> = (0..classes).map(|_| r.gen_bool(0.7)).collect();
        let wm = Array2::from_shape_vec((classes, d), w.iter().flatten().copied().collect()).unwrap();
        let cam = compute_cam(&g, wm.view(), &present);
        let want = cam_oracle(&tokens, &w, &present);
        let mut e: f64 = 0.0;
        for c in 0..classes {
            for i in 0..n {
                e = e.max((cam.values[[c, i / grid.1, i % grid.1]] - want[c][i]).abs());
            }
        }
        bump("compute_cam", e);
        let low = r.gen_range(0.05..0.5);
        let high = r.gen_range(low + 0.05..0.95);
        let labels = token_pseudo_labels(&cam, Thresholds { low, high }).unwrap();
        let expected = label_oracle(&want, &present, low, high);
        let mismatches = labels
            .labels
            .iter()
            .zip(&expected)
            .filter(|(l, &c)| **l != to_label(c))
            .count();
        bump("token_pseudo_labels", mismatches as f64);

        // schedule
        let warm = r.gen_range(1..50);
        let total = warm + r.gen_range(1..200);
        let cfg = ScheduleConfig {
            lr_max: r.gen_range(1e-5..1e-2),
            lr_floor: r.gen_range(0.0..1e-6),
            warmup_iters: warm,
            total_iters: total,
            poly_power: r.gen_range(0.5..2.0),
        };
        let t = r.gen_range(0..=total);
        bump(
            "lr_schedule",
            (lr_schedule(t, &cfg) - lr_oracle(t, cfg.lr_max, cfg.lr_floor, warm, total, cfg.poly_power)).abs(),
        );

        // EMA
        let len = r.gen_range(1..=16);
        let g0: Vec<f64> = (0..len).map(|_| r.gen_range(-2.0..2.0)).collect();
        let l0: Vec<f64> = (0..len).map(|_| r.gen_range(-2.0..2.0)).collect();
        let rho = r.gen_range(0.0..=1.0);
        let mut global = vec![ArrayD::from_shape_vec(IxDyn(&[len]), g0.clone()).unwrap()];
        let local = ArrayD::from_shape_vec(IxDyn(&[len]), l0.clone()).unwrap();
        ema_update(&mut global, &[&local], rho).unwrap();
        let mut e: f64 = 0.0;
        for i in 0..len {
            e = e.max((global[0][[i]] - (rho * g0[i] + (1.0 - rho) * l0[i])).abs());
        }
        bump("ema_update", e);

        // mIoU
        let k = r.gen_range(1..=3);
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let gen = |r: &mut ChaCha8Rng, ignore: bool| -> Vec<u8> {
            (0..h * w)
                .map(|_| {
                    if ignore && r.gen_bool(0.15) {
                        255
                    } else {
                        r.gen_range(0..=k as u8)
                    }
                })
                .collect()
        };
        let pv = gen(&mut r, true);
        let gv = gen(&mut r, true);
        let report = miou(
            &[Array2::from_shape_vec((h, w), pv.clone()).unwrap()],
            &[Array2::from_shape_vec((h, w), gv.clone()).unwrap()],
            k,
        )
        .unwrap();
        let (per, m) = miou_oracle(&pv, &gv, k);
        let mut e = (report.miou - m).abs();
        for (a, b) in report.per_class_iou.iter().zip(&per) {
            e = e.max(match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            });
        }
        bump("miou", e);
    }
    worst
}

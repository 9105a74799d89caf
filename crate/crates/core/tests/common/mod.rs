#![allow(dead_code)]
// oracles index the way the formulas are written
#![allow(clippy::needless_range_loop)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toco_core::segmenter::TrainConfig;

/// A model small enough for finite differences and quick training loops:
/// 32² images, 4×4 token grid, two blocks of width 16.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model.image_size = 32;
    cfg.model.patch_size = 8;
    cfg.model.depth = 2;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.aux_block = 1;
    cfg.crop.local_size = 16;
    cfg.crop.n_crops = 3;
    cfg.proj_hidden = 8;
    cfg.proj_dim = 4;
    cfg.decoder_hidden = 8;
    cfg.batch_size = 2;
    cfg.schedule.warmup_iters = 2;
    cfg.schedule.total_iters = 6;
    cfg.data.train_samples = 8;
    cfg.data.eval_samples = 4;
    cfg.log_every = 0;
    cfg.checkpoint_every = 0;
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

pub fn uniform3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub mod grads;
pub mod oracle;
pub mod props;

//! Class token contrast: local crops drawn from uncertain and background
//! regions, twin projection heads, the InfoNCE objective and the EMA update
//! of the global head.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{TokenLabel, TokenLabelMap};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::{ParamId, ParamStore};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Square box in global-image pixels.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropProposal {
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub local_size: usize,
    pub n_crops: usize,
    /// Minimum background coverage for a negative crop (which must also be
    /// free of foreground).
    pub bg_fraction: f64,
    /// Minimum uncertain coverage for a positive crop.
    pub unc_fraction: f64,
    pub max_retries: usize,
    pub flip_prob: f64,
    /// Brightness is scaled by a factor drawn from `1 ± brightness`.
    pub brightness: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            local_size: 16,
            n_crops: 4,
            bg_fraction: 0.9,
            unc_fraction: 0.3,
            max_retries: 32,
            flip_prob: 0.5,
            brightness: 0.1,
        }
    }
}

/// Prefix sums of per-pixel background / uncertain / foreground indicators.
struct Coverage {
    w: usize,
    sums: [Vec<u32>; 3],
}

impl Coverage {
    fn new(labels: &TokenLabelMap, image: (usize, usize)) -> Self {
        let (h, w) = image;
        let (gh, gw) = labels.grid();
        let stride = w + 1;
        let mut sums = [vec![0u32; (h + 1) * stride], vec![0u32; (h + 1) * stride], vec![0u32; (h + 1) * stride]];
        for y in 0..h {
            for x in 0..w {
                let kind = match labels.labels[[y * gh / h, x * gw / w]] {
                    TokenLabel::Background => 0,
                    TokenLabel::Uncertain => 1,
                    TokenLabel::Foreground(_) => 2,
                };
                for (k, table) in sums.iter_mut().enumerate() {
                    let v = u32::from(k == kind);
                    table[(y + 1) * stride + x + 1] =
                        v + table[y * stride + x + 1] + table[(y + 1) * stride + x] - table[y * stride + x];
                }
            }
        }
        Self { w, sums }
    }

    fn count(&self, kind: usize, x: usize, y: usize, side: usize) -> u32 {
        let s = self.w + 1;
        let t = &self.sums[kind];
        t[(y + side) * s + x + side] + t[y * s + x] - t[y * s + x + side] - t[(y + side) * s + x]
    }
}

fn classify(cov: &Coverage, x: usize, y: usize, cfg: &CropConfig) -> Option<Polarity> {
    let area = (cfg.local_size * cfg.local_size) as f64;
    let bg = cov.count(0, x, y, cfg.local_size) as f64 / area;
    let unc = cov.count(1, x, y, cfg.local_size) as f64 / area;
    let fg = cov.count(2, x, y, cfg.local_size);
    if fg == 0 && bg >= cfg.bg_fraction {
        Some(Polarity::Negative)
    } else if unc >= cfg.unc_fraction {
        Some(Polarity::Positive)
    } else {
        None
    }
}

/// Draws `cfg.n_crops` boxes uniformly over the image and keeps those that
/// fall in background (negative) or uncertain (positive) regions of
/// `labels`. After `max_retries` misses a crop falls back to a positive box
/// at the most uncertain location.
pub fn sample_crops<R: Rng>(
    labels: &TokenLabelMap,
    image: (usize, usize),
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<Vec<CropProposal>> {
    let side = cfg.local_size;
    if cfg.n_crops == 0 {
        return Err(Error::config("n_crops must be at least 1"));
    }
    if side == 0 || side > image.0 || side > image.1 {
        return Err(Error::config(format!(
            "local crop side {side} does not fit a {}x{} image",
            image.0, image.1
        )));
    }
    let cov = Coverage::new(labels, image);
    let mut fallback: Option<(usize, usize)> = None;
    let mut out = Vec::with_capacity(cfg.n_crops);
    for _ in 0..cfg.n_crops {
        let mut chosen = None;
        for _ in 0..cfg.max_retries.max(1) {
            let x = rng.gen_range(0..=image.1 - side);
            let y = rng.gen_range(0..=image.0 - side);
            if let Some(polarity) = classify(&cov, x, y, cfg) {
                chosen = Some(CropProposal { x, y, side, polarity });
                break;
            }
        }
        let crop = chosen.unwrap_or_else(|| {
            let (x, y) = *fallback.get_or_insert_with(|| {
                let mut best = (0, 0, 0);
                for y in 0..=image.0 - side {
                    for x in 0..=image.1 - side {
                        let u = cov.count(1, x, y, side);
                        if u > best.2 {
                            best = (x, y, u);
                        }
                    }
                }
                (best.0, best.1)
            });
            CropProposal {
                x,
                y,
                side,
                polarity: Polarity::Positive,
            }
        });
        out.push(crop);
    }
    Ok(out)
}

pub fn hflip<T: Float>(image: ArrayView3<'_, T>) -> Array3<T> {
    image.slice(s![.., .., ..;-1]).to_owned()
}

/// Cuts `crop` out of `image` and, when `augment` is set, applies a random
/// horizontal flip and brightness scaling (clamped to `[0, 1]`).
pub fn crop_and_augment<T: Float, R: Rng>(
    image: ArrayView3<'_, T>,
    crop: &CropProposal,
    cfg: &CropConfig,
    augment: bool,
    rng: &mut R,
) -> Result<Array3<T>> {
    let (_, h, w) = image.dim();
    if crop.side == 0 || crop.x + crop.side > w || crop.y + crop.side > h {
        return Err(Error::shape(format!(
            "crop at ({}, {}) side {} exceeds {h}x{w} image",
            crop.x, crop.y, crop.side
        )));
    }
    let mut out = image
        .slice(s![.., crop.y..crop.y + crop.side, crop.x..crop.x + crop.side])
        .to_owned();
    if augment {
        if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
            out = hflip(out.view());
        }
        if cfg.brightness > 0.0 {
            let f = T::of(rng.gen_range(1.0 - cfg.brightness..=1.0 + cfg.brightness));
            out.mapv_inplace(|v| (v * f).max(T::zero()).min(T::one()));
        }
    }
    Ok(out)
}

/// Three linear layers with ReLU between them, then L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    ids: [ParamId; 6],
}

#[derive(Clone, Debug)]
pub struct ProjectionCache<T> {
    input: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
    raw: Array2<T>,
    norms: Array1<T>,
    pub out: Array2<T>,
}

pub const PROJ_EPS: f64 = 1e-8;

impl ProjectionHead {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let (d, hidden, out) = dims;
        let w1 = store.trunc_normal(format!("{prefix}.fc1.weight"), &[d, hidden], 0.02, rng);
        let b1 = store.zeros(format!("{prefix}.fc1.bias"), &[hidden]);
        let w2 = store.trunc_normal(format!("{prefix}.fc2.weight"), &[hidden, hidden], 0.02, rng);
        let b2 = store.zeros(format!("{prefix}.fc2.bias"), &[hidden]);
        let w3 = store.trunc_normal(format!("{prefix}.fc3.weight"), &[hidden, out], 0.02, rng);
        let b3 = store.zeros(format!("{prefix}.fc3.bias"), &[out]);
        Self {
            ids: [w1, b1, w2, b2, w3, b3],
        }
    }

    pub fn bind<T: Float>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let names = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"];
        let mut ids = Vec::with_capacity(6);
        for n in names {
            let full = format!("{prefix}.{n}");
            ids.push(
                store
                    .id_of(&full)
                    .ok_or_else(|| Error::shape(format!("missing tensor {full}")))?,
            );
        }
        Ok(Self {
            ids: ids.try_into().expect("six ids"),
        })
    }

    pub fn ids(&self) -> &[ParamId; 6] {
        &self.ids
    }

    pub fn tensors<'a, T: Float>(&self, store: &'a ParamStore<T>) -> Vec<&'a ArrayD<T>> {
        self.ids.iter().map(|&id| store.get(id)).collect()
    }

    /// Projects each row of `x` to a unit vector.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: ArrayView2<'_, T>) -> ProjectionCache<T> {
        let [w1, b1, w2, b2, w3, b3] = self.ids;
        let relu = |v: T| v.max(T::zero());
        let h1 = crate::nn::linear(x, store.mat(w1), Some(store.vec(b1))).mapv(relu);
        let h2 = crate::nn::linear(h1.view(), store.mat(w2), Some(store.vec(b2))).mapv(relu);
        let raw = crate::nn::linear(h2.view(), store.mat(w3), Some(store.vec(b3)));
        let eps = T::of(PROJ_EPS);
        let norms: Array1<T> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt().max(eps)).collect();
        let out = &raw / &norms.view().insert_axis(Axis(1));
        ProjectionCache {
            input: x.to_owned(),
            h1,
            h2,
            raw,
            norms,
            out,
        }
    }

    pub fn project<T: Float>(&self, store: &ParamStore<T>, x: ArrayView1<'_, T>) -> Array1<T> {
        let cache = self.forward(store, x.insert_axis(Axis(0)));
        cache.out.row(0).to_owned()
    }

    pub fn backward<T: Float>(
        &self,
        store: &ParamStore<T>,
        cache: &ProjectionCache<T>,
        dout: ArrayView2<'_, T>,
        grads: &mut ParamStore<T>,
    ) -> Array2<T> {
        let [w1, b1, w2, b2, w3, b3] = self.ids;
        let eps = T::of(PROJ_EPS);
        let mut draw = Array2::zeros(cache.raw.raw_dim());
        for i in 0..draw.nrows() {
            let g = crate::nn::l2_normalize_backward(cache.out.row(i), cache.norms[i], eps, dout.row(i));
            draw.row_mut(i).assign(&g);
        }
        let lin = |x: &Array2<T>, w: ParamId, b: ParamId, dy: &Array2<T>, grads: &mut ParamStore<T>| {
            let dx = crate::nn::linear_backward(x.view(), store.mat(w), dy.view(), grads.mat_mut(w), None);
            grads.vec_mut(b).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
            dx
        };
        let mut dh2 = lin(&cache.h2, w3, b3, &draw, grads);
        ndarray::Zip::from(&mut dh2).and(&cache.h2).for_each(|g, &h| {
            if h <= T::zero() {
                *g = T::zero()
            }
        });
        let mut dh1 = lin(&cache.h1, w2, b2, &dh2, grads);
        ndarray::Zip::from(&mut dh1).and(&cache.h1).for_each(|g, &h| {
            if h <= T::zero() {
                *g = T::zero()
            }
        });
        lin(&cache.input, w1, b1, &dh1, grads)
    }
}

/// Anchor `p` with positive and negative keys, one per row.
#[derive(Clone, Debug)]
pub struct ContrastBatch<T> {
    pub p: Array1<T>,
    pub q_pos: Array2<T>,
    pub q_neg: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct ContrastGrad<T> {
    pub loss: T,
    pub dp: Array1<T>,
    pub dq_pos: Array2<T>,
    pub dq_neg: Array2<T>,
}

pub fn ctc_loss<T: Float>(batch: &ContrastBatch<T>, tau: f64, eps: f64) -> Result<T> {
    ctc_loss_grad(batch, tau, eps).map(|g| g.loss)
}

/// InfoNCE averaged over positives:
/// `-(1/N⁺) Σ log(e^{p·q⁺/τ} / (e^{p·q⁺/τ} + Σ e^{p·q⁻/τ} + ε))`.
pub fn ctc_loss_grad<T: Float>(batch: &ContrastBatch<T>, tau: f64, eps: f64) -> Result<ContrastGrad<T>> {
    let n_pos = batch.q_pos.nrows();
    if n_pos == 0 {
        return Err(Error::EmptyPositives);
    }
    let p = batch.p.mapv(|v| v.as_f64());
    let to64 = |m: &Array2<T>| m.mapv(|v| v.as_f64());
    let (qp, qn) = (to64(&batch.q_pos), to64(&batch.q_neg));
    let neg_exp: Array1<f64> = qn.dot(&p).mapv(|s| (s / tau).exp());
    let neg_sum = neg_exp.sum();
    let inv = 1.0 / n_pos as f64;

    let mut loss = 0.0;
    let mut dp = Array1::<f64>::zeros(p.len());
    let mut dq_pos = Array2::<f64>::zeros(qp.raw_dim());
    let mut dneg_logit = Array1::<f64>::zeros(qn.nrows());
    for (i, q) in qp.rows().into_iter().enumerate() {
        let pos_exp = (q.dot(&p) / tau).exp();
        let z = pos_exp + neg_sum + eps;
        loss += inv * (z.ln() - q.dot(&p) / tau);
        // d/d(logit⁺) = -1 + e⁺/Z, d/d(logit⁻) = e⁻/Z
        let g_pos = inv * (pos_exp / z - 1.0);
        dp.scaled_add(g_pos / tau, &q);
        dq_pos.row_mut(i).assign(&p.mapv(|v| v * g_pos / tau));
        dneg_logit.scaled_add(inv / z, &neg_exp);
    }
    let mut dq_neg = Array2::<f64>::zeros(qn.raw_dim());
    for (k, q) in qn.rows().into_iter().enumerate() {
        dp.scaled_add(dneg_logit[k] / tau, &q);
        dq_neg.row_mut(k).assign(&p.mapv(|v| v * dneg_logit[k] / tau));
    }
    let back = |m: Array2<f64>| m.mapv(T::of);
    Ok(ContrastGrad {
        loss: T::of(loss),
        dp: dp.mapv(T::of),
        dq_pos: back(dq_pos),
        dq_neg: back(dq_neg),
    })
}

/// `θᵍ ← ρ θᵍ + (1 − ρ) θˡ`, tensor by tensor.
pub fn ema_update<T: Float>(global: &mut [ArrayD<T>], local: &[&ArrayD<T>], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("EMA momentum {rho} outside [0, 1]")));
    }
    if global.len() != local.len() {
        return Err(Error::shape(format!(
            "EMA over {} global and {} local tensors",
            global.len(),
            local.len()
        )));
    }
    if let Some((g, l)) = global.iter().zip(local).find(|(g, l)| g.shape() != l.shape()) {
        return Err(Error::shape(format!(
            "EMA shape mismatch {:?} vs {:?}",
            g.shape(),
            l.shape()
        )));
    }
    let (r, one_r) = (T::of(rho), T::of(1.0 - rho));
    for (g, l) in global.iter_mut().zip(local) {
        ndarray::Zip::from(g).and(*l).for_each(|g, &l| *g = r * *g + one_r * l);
    }
    Ok(())
}

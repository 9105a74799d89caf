//! Class activation maps, the max-pooled classifier they come from, and the
//! dual-threshold pseudo labels derived from them.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};
use crate::float::Float;

/// Label value for "background" in exported label grids.
pub const BG: u8 = 0;
/// Label value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Output of [`gmp_classify`]; `argmax[i]` is the token that won the max for
/// feature channel `i` and receives its gradient.
#[derive(Clone, Debug)]
pub struct GmpOutput<T> {
    pub logits: Array1<T>,
    pub pooled: Array1<T>,
    pub argmax: Vec<usize>,
}

/// Global max-pooling over tokens followed by a bias-free linear layer with
/// `weights` of shape `c × d`.
pub fn gmp_classify<T: Float>(features: &TokenGrid<T>, weights: ArrayView2<'_, T>) -> GmpOutput<T> {
    let f = &features.tokens;
    let d = f.ncols();
    let mut pooled = Array1::from_elem(d, T::neg_infinity());
    let mut argmax = vec![0; d];
    for (t, row) in f.rows().into_iter().enumerate() {
        for i in 0..d {
            // strict comparison keeps the first maximal token on ties
            if row[i] > pooled[i] {
                pooled[i] = row[i];
                argmax[i] = t;
            }
        }
    }
    let logits = weights.dot(&pooled);
    GmpOutput {
        logits,
        pooled,
        argmax,
    }
}

/// Accumulates dL/dW into `dweights` and returns dL/dF.
pub fn gmp_classify_backward<T: Float>(
    features: &TokenGrid<T>,
    weights: ArrayView2<'_, T>,
    out: &GmpOutput<T>,
    dlogits: ArrayView1<'_, T>,
    mut dweights: ArrayViewMut2<'_, T>,
) -> Array2<T> {
    let dpooled = weights.t().dot(&dlogits);
    for c in 0..weights.nrows() {
        let g = dlogits[c];
        dweights.row_mut(c).scaled_add(g, &out.pooled);
    }
    let mut df = Array2::zeros(features.tokens.raw_dim());
    for (i, &t) in out.argmax.iter().enumerate() {
        df[[t, i]] = dpooled[i];
    }
    df
}

const LOG_CLAMP: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-label soft-margin loss: mean over classes of sigmoid cross-entropy.
pub fn cls_loss<T: Float>(logits: ArrayView1<'_, T>, labels: &[bool]) -> T {
    cls_loss_grad(logits, labels).0
}

pub fn cls_loss_grad<T: Float>(logits: ArrayView1<'_, T>, labels: &[bool]) -> (T, Array1<T>) {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    let c = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (k, (&x, &y)) in logits.iter().zip(labels).enumerate() {
        let x = x.as_f64();
        let p = sigmoid(x);
        let q = sigmoid(-x);
        let g = if y {
            loss -= p.max(LOG_CLAMP).ln();
            if p > LOG_CLAMP {
                -q
            } else {
                0.0
            }
        } else {
            loss -= q.max(LOG_CLAMP).ln();
            if q > LOG_CLAMP {
                p
            } else {
                0.0
            }
        };
        grad[k] = T::of(g / c);
    }
    (T::of(loss / c), grad)
}

/// Per-class activation on the token grid, every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap<T> {
    /// `c × h × w`
    pub values: Array3<T>,
    pub present: Vec<bool>,
}

impl<T: Float> ActivationMap<T> {
    pub fn classes(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    /// Max over present classes at each position, with the winning class
    /// (lowest index on ties). Positions with no present class score 0.
    pub fn max_score(&self) -> (Array2<T>, Array2<Option<usize>>) {
        let (c, h, w) = self.values.dim();
        let mut score = Array2::zeros((h, w));
        let mut arg = Array2::from_elem((h, w), None);
        for y in 0..h {
            for x in 0..w {
                let mut best: Option<(usize, T)> = None;
                for k in (0..c).filter(|&k| self.present[k]) {
                    let v = self.values[[k, y, x]];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                }
                if let Some((k, v)) = best {
                    score[[y, x]] = v;
                    arg[[y, x]] = Some(k);
                }
            }
        }
        (score, arg)
    }
}

/// `relu(F Wᵀ)` per class, divided by its maximum. Classes not marked present,
/// and classes with no positive activation, yield all-zero maps.
pub fn compute_cam<T: Float>(
    features: &TokenGrid<T>,
    weights: ArrayView2<'_, T>,
    present: &[bool],
) -> ActivationMap<T> {
    let (h, w) = features.grid;
    let c = weights.nrows();
    assert_eq!(present.len(), c, "one presence flag per class");
    let raw = features.tokens.dot(&weights.t()); // n × c
    let mut values = Array3::zeros((c, h, w));
    for k in (0..c).filter(|&k| present[k]) {
        let col = raw.column(k);
        let max = col.iter().fold(T::zero(), |a, &v| a.max(v));
        if max > T::zero() {
            let mut plane = values.index_axis_mut(Axis(0), k);
            for (dst, &v) in plane.iter_mut().zip(col.iter()) {
                *dst = v.max(T::zero()) / max;
            }
        }
    }
    ActivationMap {
        values,
        present: present.to_vec(),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Thresholds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(0.0 < low && low < high && high < 1.0) {
            return Err(Error::Thresholds { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.low, self.high).map(|_| ())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TokenLabel {
    Background,
    Uncertain,
    Foreground(usize),
}

impl TokenLabel {
    pub fn is_reliable(self) -> bool {
        !matches!(self, TokenLabel::Uncertain)
    }

    /// Encoding used in label PNGs: BG = 0, class k = k + 1, uncertain = 255.
    pub fn code(self) -> u8 {
        match self {
            TokenLabel::Background => BG,
            TokenLabel::Uncertain => IGNORE,
            TokenLabel::Foreground(k) => (k + 1) as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLabelMap {
    pub labels: Array2<TokenLabel>,
}

impl TokenLabelMap {
    pub fn grid(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenLabel> + '_ {
        self.labels.iter().copied()
    }

    pub fn codes(&self) -> Array2<u8> {
        self.labels.mapv(TokenLabel::code)
    }
}

fn label_rule<T: Float>(score: T, arg: Option<usize>, thr: Thresholds) -> TokenLabel {
    let s = score.as_f64();
    match arg {
        Some(k) if s > thr.high => TokenLabel::Foreground(k),
        _ if s < thr.low => TokenLabel::Background,
        None => TokenLabel::Background,
        _ => TokenLabel::Uncertain,
    }
}

/// Splits a CAM into reliable foreground (`s > high`), reliable background
/// (`s < low`) and uncertain tokens, where `s` is the max present-class score.
pub fn token_pseudo_labels<T: Float>(cam: &ActivationMap<T>, thr: Thresholds) -> Result<TokenLabelMap> {
    thr.validate()?;
    let (score, arg) = cam.max_score();
    let mut labels = Array2::from_elem(score.raw_dim(), TokenLabel::Uncertain);
    ndarray::Zip::from(&mut labels)
        .and(&score)
        .and(&arg)
        .for_each(|l, &s, &a| *l = label_rule(s, a, thr));
    Ok(TokenLabelMap { labels })
}

/// Nearest-neighbour resize of a `h × w` grid (source index
/// `floor(i · in / out)`).
pub fn upsample_nearest<A: Clone>(grid: &Array2<A>, out: (usize, usize)) -> Array2<A> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn(out, |(y, x)| {
        grid[[(y * h / out.0).min(h - 1), (x * w / out.1).min(w - 1)]].clone()
    })
}

/// Per-pixel segmentation targets: the token rule applied to the CAM
/// upsampled (nearest) to `out`, uncertain pixels mapped to [`IGNORE`].
pub fn seg_pseudo_labels<T: Float>(
    cam: &ActivationMap<T>,
    thr: Thresholds,
    out: (usize, usize),
) -> Result<Array2<u8>> {
    let tokens = token_pseudo_labels(cam, thr)?;
    Ok(upsample_nearest(&tokens.codes(), out))
}

/// Bilinear upsampling of every class plane to `out`.
pub fn upsample_cam<T: Float>(cam: &ActivationMap<T>, out: (usize, usize)) -> ActivationMap<T> {
    let (c, h, w) = cam.values.dim();
    let rh = crate::nn::bilinear_matrix::<T>(out.0, h);
    let rw = crate::nn::bilinear_matrix::<T>(out.1, w);
    let mut values = Array3::zeros((c, out.0, out.1));
    for k in 0..c {
        let plane = rh.dot(&cam.values.index_axis(Axis(0), k)).dot(&rw.t());
        values.index_axis_mut(Axis(0), k).assign(&plane);
    }
    ActivationMap {
        values,
        present: cam.present.clone(),
    }
}

/// Single-threshold labeling used to score CAM quality: the best present
/// class where its score exceeds `bg_threshold`, background elsewhere.
pub fn cam_to_labels<T: Float>(cam: &ActivationMap<T>, bg_threshold: f64) -> Array2<u8> {
    let (score, arg) = cam.max_score();
    let mut out = Array2::zeros(score.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&score)
        .and(&arg)
        .for_each(|o, &s, &a| {
            *o = match a {
                Some(k) if s.as_f64() > bg_threshold => (k + 1) as u8,
                _ => BG,
            }
        });
    out
}

//! Segmentation head on the final patch-token grid: two dilated 3×3
//! convolutions with ReLU and a 1×1 prediction layer.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_DILATION: usize = 5;

/// Gathers the 3×3 dilated neighbourhood of every grid position into one row
/// (tap-major, then channel); out-of-grid taps are zero padding.
pub fn im2col<T: Float>(x: ArrayView2<'_, T>, grid: (usize, usize), dilation: usize) -> Array2<T> {
    let (h, w) = grid;
    let c = x.ncols();
    let mut col = Array2::zeros((h * w, 9 * c));
    let d = dilation as isize;
    for y in 0..h {
        for xx in 0..w {
            let mut row = col.row_mut(y * w + xx);
            for (tap, (dy, dx)) in taps(d).enumerate() {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                row.slice_mut(ndarray::s![tap * c..(tap + 1) * c])
                    .assign(&x.row(sy as usize * w + sx as usize));
            }
        }
    }
    col
}

fn col2im<T: Float>(dcol: ArrayView2<'_, T>, grid: (usize, usize), dilation: usize, c: usize) -> Array2<T> {
    let (h, w) = grid;
    let mut dx = Array2::zeros((h * w, c));
    let d = dilation as isize;
    for y in 0..h {
        for xx in 0..w {
            let row = dcol.row(y * w + xx);
            for (tap, (dy, ddx)) in taps(d).enumerate() {
                let (sy, sx) = (y as isize + dy, xx as isize + ddx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let mut dst = dx.row_mut(sy as usize * w + sx as usize);
                dst += &row.slice(ndarray::s![tap * c..(tap + 1) * c]);
            }
        }
    }
    dx
}

fn taps(d: isize) -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| (dy * d, dx * d)))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pred_w: ParamId,
    pred_b: ParamId,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    grid: (usize, usize),
    col1: Array2<T>,
    a1: Array2<T>,
    col2: Array2<T>,
    a2: Array2<T>,
    /// `n × (c + 1)` logits at token resolution.
    pub logits: Array2<T>,
}

const NAMES: [&str; 6] = [
    "decoder.conv1.weight",
    "decoder.conv1.bias",
    "decoder.conv2.weight",
    "decoder.conv2.bias",
    "decoder.pred.weight",
    "decoder.pred.bias",
];

impl Decoder {
    /// Weights are stored as `(9 · in) × out` matrices matching [`im2col`].
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let conv1_w = store.trunc_normal(NAMES[0], &[9 * in_dim, hidden], 0.02, rng);
        let conv1_b = store.zeros(NAMES[1], &[hidden]);
        let conv2_w = store.trunc_normal(NAMES[2], &[9 * hidden, hidden], 0.02, rng);
        let conv2_b = store.zeros(NAMES[3], &[hidden]);
        let pred_w = store.trunc_normal(NAMES[4], &[hidden, outputs], 0.02, rng);
        let pred_b = store.zeros(NAMES[5], &[outputs]);
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            pred_w,
            pred_b,
            dilation: DEFAULT_DILATION,
        }
    }

    pub fn bind<T: Float>(store: &ParamStore<T>) -> Result<Self> {
        let find = |n: &str| store.id_of(n).ok_or_else(|| Error::shape(format!("missing tensor {n}")));
        Ok(Self {
            conv1_w: find(NAMES[0])?,
            conv1_b: find(NAMES[1])?,
            conv2_w: find(NAMES[2])?,
            conv2_b: find(NAMES[3])?,
            pred_w: find(NAMES[4])?,
            pred_b: find(NAMES[5])?,
            dilation: DEFAULT_DILATION,
        })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, f: &TokenGrid<T>) -> DecoderCache<T> {
        let relu = |v: T| v.max(T::zero());
        let col1 = im2col(f.tokens.view(), f.grid, self.dilation);
        let a1 = crate::nn::linear(col1.view(), store.mat(self.conv1_w), Some(store.vec(self.conv1_b))).mapv(relu);
        let col2 = im2col(a1.view(), f.grid, self.dilation);
        let a2 = crate::nn::linear(col2.view(), store.mat(self.conv2_w), Some(store.vec(self.conv2_b))).mapv(relu);
        let logits = crate::nn::linear(a2.view(), store.mat(self.pred_w), Some(store.vec(self.pred_b)));
        DecoderCache {
            grid: f.grid,
            col1,
            a1,
            col2,
            a2,
            logits,
        }
    }

    /// Returns dL/dF for upstream `dlogits` (`n × (c + 1)`).
    pub fn backward<T: Float>(
        &self,
        store: &ParamStore<T>,
        cache: &DecoderCache<T>,
        dlogits: ArrayView2<'_, T>,
        grads: &mut ParamStore<T>,
    ) -> Array2<T> {
        let lin = |x: &Array2<T>, w: ParamId, b: ParamId, dy: ArrayView2<'_, T>, grads: &mut ParamStore<T>| {
            let dx = crate::nn::linear_backward(x.view(), store.mat(w), dy, grads.mat_mut(w), None);
            grads.vec_mut(b).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
            dx
        };
        let mask = |g: &mut Array2<T>, a: &Array2<T>| {
            ndarray::Zip::from(g).and(a).for_each(|g, &a| {
                if a <= T::zero() {
                    *g = T::zero()
                }
            })
        };
        let mut da2 = lin(&cache.a2, self.pred_w, self.pred_b, dlogits, grads);
        mask(&mut da2, &cache.a2);
        let dcol2 = lin(&cache.col2, self.conv2_w, self.conv2_b, da2.view(), grads);
        let mut da1 = col2im(dcol2.view(), cache.grid, self.dilation, cache.a1.ncols());
        mask(&mut da1, &cache.a1);
        let dcol1 = lin(&cache.col1, self.conv1_w, self.conv1_b, da1.view(), grads);
        col2im(dcol1.view(), cache.grid, self.dilation, dcol1.ncols() / 9)
    }
}

/// Bilinear upsampling of token-resolution logits (`n × k`, grid order) to
/// `out` pixels, returned as `(out.0 · out.1) × k`.
pub fn upsample_logits<T: Float>(
    logits: ArrayView2<'_, T>,
    grid: (usize, usize),
    out: (usize, usize),
) -> (Array2<T>, Array2<T>) {
    let r = crate::nn::bilinear_grid_matrix::<T>(out, grid);
    (r.dot(&logits), r)
}

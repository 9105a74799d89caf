//! Dense building blocks with explicit backward passes.
//!
//! Every `*_backward` accumulates into the parameter gradients it is handed
//! and returns the gradient with respect to its input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use crate::float::Float;

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn linear<T: Float>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    b: Option<ArrayView1<'_, T>>,
) -> Array2<T> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

pub fn linear_backward<T: Float>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    mut dw: ArrayViewMut2<'_, T>,
    db: Option<ArrayViewMut1<'_, T>>,
) -> Array2<T> {
    ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut dw);
    if let Some(mut db) = db {
        db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.t())
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layer_norm<T: Float>(
    x: ArrayView2<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gamma + beta;
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Float>(
    cache: &LayerNormCache<T>,
    gamma: ArrayView1<'_, T>,
    dy: ArrayView2<'_, T>,
    mut dgamma: ArrayViewMut1<'_, T>,
    mut dbeta: ArrayViewMut1<'_, T>,
) -> Array2<T> {
    dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut row, xhat), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let sum_d = row.sum();
        let sum_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>();
        ndarray::Zip::from(&mut row).and(&xhat).for_each(|g, &xh| {
            *g = r * (*g - sum_d / d - xh * sum_dx / d);
        });
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

// libm tanh is several times slower than exp on the hot path
fn tanh<T: Float>(u: T) -> T {
    let e = (-(u.abs() + u.abs())).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(k * (x + c * x * x * x)))
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = tanh(k * (x + c * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub fn softmax_rows_inplace<T: Float>(mut s: ArrayViewMut2<'_, T>) {
    for mut row in s.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Backward of a row softmax given its output `a` and upstream gradient `da`.
pub fn softmax_rows_backward<T: Float>(a: ArrayView2<'_, T>, da: ArrayView2<'_, T>) -> Array2<T> {
    let mut ds = &a * &da;
    for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
        let s = row.sum();
        ndarray::Zip::from(&mut row).and(&arow).for_each(|g, &p| *g -= p * s);
    }
    ds
}

/// 1-D bilinear resampling weights with half-pixel centers (the
/// `align_corners = false` convention). Shape is `out_len × in_len`.
pub fn bilinear_matrix<T: Float>(out_len: usize, in_len: usize) -> Array2<T> {
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == 0 || out_len == 0 {
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += T::of(1.0 - frac);
        m[[i, i1]] += T::of(frac);
    }
    m
}

/// 2-D bilinear resampling of a row-major `(in_h, in_w)` grid flattened to
/// `in_h * in_w` rows, as one `(out_h * out_w) × (in_h * in_w)` matrix.
pub fn bilinear_grid_matrix<T: Float>(out: (usize, usize), input: (usize, usize)) -> Array2<T> {
    let rh = bilinear_matrix::<T>(out.0, input.0);
    let rw = bilinear_matrix::<T>(out.1, input.1);
    let mut m = Array2::zeros((out.0 * out.1, input.0 * input.1));
    for oy in 0..out.0 {
        for iy in 0..input.0 {
            let a = rh[[oy, iy]];
            if a == T::zero() {
                continue;
            }
            for ox in 0..out.1 {
                for ix in 0..input.1 {
                    let b = rw[[ox, ix]];
                    if b != T::zero() {
                        m[[oy * out.1 + ox, iy * input.1 + ix]] = a * b;
                    }
                }
            }
        }
    }
    m
}

/// `v / max(‖v‖, eps)`; also returns the clamped norm.
pub fn l2_normalize<T: Float>(v: ArrayView1<'_, T>, eps: T) -> (Array1<T>, T) {
    let norm = v.dot(&v).sqrt().max(eps);
    (v.mapv(|x| x / norm), norm)
}

/// Backward of [`l2_normalize`] given the normalized output `u`, the clamped
/// norm and upstream gradient `du`.
pub fn l2_normalize_backward<T: Float>(
    u: ArrayView1<'_, T>,
    norm: T,
    eps: T,
    du: ArrayView1<'_, T>,
) -> Array1<T> {
    if norm <= eps {
        return du.mapv(|g| g / eps);
    }
    let proj = u.dot(&du);
    (&du - &u.mapv(|x| x * proj)).mapv(|g| g / norm)
}

//! Image-conditioned refinement of score maps: repeated local averaging with
//! weights `exp(-‖Iᵢ − Iⱼ‖² / σ²)` over 3×3 neighbourhoods at several
//! dilations, renormalized so each pixel keeps its original score total.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParConfig {
    pub iters: usize,
    pub sigma_rgb: f64,
    pub dilations: Vec<usize>,
}

impl Default for ParConfig {
    fn default() -> Self {
        Self {
            iters: 10,
            sigma_rgb: 0.1,
            dilations: vec![1, 2, 4],
        }
    }
}

/// Neighbour offsets: the centre once, then the 8 ring taps per dilation.
fn offsets(dilations: &[usize]) -> Vec<(isize, isize)> {
    let mut out = vec![(0, 0)];
    for &d in dilations {
        let d = d as isize;
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dy != 0 || dx != 0 {
                    out.push((dy * d, dx * d));
                }
            }
        }
    }
    out
}

/// `image` is `C × H × W`, `scores` is `K × H × W`.
pub fn par_refine<T: Float>(
    image: ArrayView3<'_, T>,
    scores: ArrayView3<'_, T>,
    cfg: &ParConfig,
) -> Result<Array3<T>> {
    let (_, h, w) = image.dim();
    let (k, sh, sw) = scores.dim();
    if (sh, sw) != (h, w) {
        return Err(Error::shape(format!(
            "score maps {sh}x{sw} do not match image {h}x{w}"
        )));
    }
    if cfg.iters == 0 {
        return Ok(scores.to_owned());
    }
    if !(cfg.sigma_rgb > 0.0) {
        return Err(Error::config("sigma_rgb must be positive"));
    }
    let offs = offsets(&cfg.dilations);
    let inv_s2 = 1.0 / (cfg.sigma_rgb * cfg.sigma_rgb);
    let n = h * w;
    let img: Vec<Vec<T>> = image.outer_iter().map(|ch| ch.iter().copied().collect()).collect();
    let inv_s2 = T::of(inv_s2);

    // One weight plane per offset, zero where the neighbour is off-image,
    // normalized so each pixel's weights sum to one. The affinity is
    // symmetric, so the plane for -o is the plane for o shifted.
    let mut planes = vec![vec![T::zero(); n]; offs.len()];
    for (o, &(dy, dx)) in offs.iter().enumerate() {
        let mirror = offs[..o].iter().position(|&(a, b)| (a, b) == (-dy, -dx));
        for (y, x) in valid(h, w, dy, dx) {
            let p = y * w + x;
            let q = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
            planes[o][p] = match mirror {
                Some(m) => planes[m][q],
                None => {
                    let dist2: T = img.iter().map(|ch| (ch[p] - ch[q]) * (ch[p] - ch[q])).sum();
                    (-dist2 * inv_s2).exp()
                }
            };
        }
    }
    let totals: Vec<T> = (0..n).map(|p| planes.iter().map(|pl| pl[p]).sum()).collect();
    for pl in planes.iter_mut() {
        for (v, &t) in pl.iter_mut().zip(&totals) {
            *v /= t;
        }
    }

    let mut cur: Vec<Vec<T>> = scores.outer_iter().map(|pl| pl.iter().copied().collect()).collect();
    let mass: Vec<T> = (0..n).map(|p| cur.iter().map(|pl| pl[p]).sum()).collect();
    let mut next = vec![vec![T::zero(); n]; k];
    for _ in 0..cfg.iters {
        for pl in next.iter_mut() {
            pl.fill(T::zero());
        }
        for (o, &(dy, dx)) in offs.iter().enumerate() {
            let wts = &planes[o];
            let shift = dy * w as isize + dx;
            let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)).max(0) as usize);
            let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)).max(0) as usize);
            if x0 >= x1 {
                continue;
            }
            for (src, dst) in cur.iter().zip(next.iter_mut()) {
                for y in y0..y1 {
                    let row = y * w;
                    let p = row + x0..row + x1;
                    let q = (row as isize + x0 as isize + shift) as usize;
                    let q = q..q + (x1 - x0);
                    for ((d, &wt), &s) in dst[p.clone()].iter_mut().zip(&wts[p]).zip(&src[q]) {
                        *d += wt * s;
                    }
                }
            }
        }
        for p in 0..n {
            let sum: T = next.iter().map(|pl| pl[p]).sum();
            if sum > T::zero() {
                let scale = mass[p] / sum;
                for pl in next.iter_mut() {
                    pl[p] *= scale;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(Array3::from_shape_fn((k, h, w), |(c, y, x)| cur[c][y * w + x]))
}

/// Pixels `(y, x)` whose neighbour at `(y + dy, x + dx)` lies on the image.
fn valid(h: usize, w: usize, dy: isize, dx: isize) -> impl Iterator<Item = (usize, usize)> {
    let inside = move |v: isize, len: usize| v >= 0 && v < len as isize;
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x))).filter(move |&(y, x)| {
        inside(y as isize + dy, h) && inside(x as isize + dx, w)
    })
}

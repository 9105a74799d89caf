//! Segmentation cross-entropy and the weighted total objective.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cam::IGNORE;
use crate::error::{Error, Result};
use crate::float::Float;

pub fn seg_loss<T: Float>(logits: ArrayView2<'_, T>, labels: ArrayView1<'_, u8>) -> T {
    seg_loss_grad(logits, labels).0
}

/// Mean softmax cross-entropy over pixels whose label is not [`IGNORE`];
/// rows of `logits` are pixels. Zero (with zero gradient) if every pixel is
/// ignored.
pub fn seg_loss_grad<T: Float>(logits: ArrayView2<'_, T>, labels: ArrayView1<'_, u8>) -> (T, Array2<T>) {
    assert_eq!(logits.nrows(), labels.len(), "one label per pixel");
    let k = logits.ncols();
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = Array2::zeros(logits.raw_dim());
    if valid == 0 {
        return (T::zero(), grad);
    }
    let inv = 1.0 / valid as f64;
    let mut loss = 0.0;
    for ((row, &label), mut g) in logits.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        if label == IGNORE {
            continue;
        }
        let label = label as usize;
        assert!(label < k, "label {label} outside {k} classes");
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        let lse = m + z.ln();
        loss += inv * (lse - row[label].as_f64());
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j].as_f64() - lse).exp();
            *gj = T::of(inv * (p - f64::from(u8::from(j == label))));
        }
    }
    (T::of(loss), grad)
}

/// Per-term losses of one step (batch means) and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_cls_aux: f64,
    pub l_ptc: f64,
    pub l_ctc: f64,
    pub l_seg: f64,
    /// Optional mask regularizer (unweighted, zero when none is installed).
    #[serde(default)]
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ptc: f64,
    pub ctc: f64,
    pub seg: f64,
}

/// Extra spatial-consistency term on the decoder output. None ships with the
/// crate; install one with `Trainer::with_regularizer`.
pub trait Regularizer<T>: Send + Sync {
    /// Loss and gradient for `n × k` token-resolution decoder logits.
    fn evaluate(&self, logits: ArrayView2<'_, T>) -> (T, Array2<T>);
}

/// `total = cls + cls_aux + λ₁·ptc + λ₂·ctc + λ₃·seg`.
pub fn total_loss(parts: [f64; 5], weights: LossWeights) -> Result<LossBreakdown> {
    let names = ["l_cls", "l_cls_aux", "l_ptc", "l_ctc", "l_seg"];
    if let Some(i) = parts.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: names[i].into(),
            detail: format!("loss parts {parts:?}"),
        });
    }
    let [l_cls, l_cls_aux, l_ptc, l_ctc, l_seg] = parts;
    Ok(LossBreakdown {
        l_cls,
        l_cls_aux,
        l_ptc,
        l_ctc,
        l_seg,
        l_reg: 0.0,
        total: l_cls + l_cls_aux + weights.ptc * l_ptc + weights.ctc * l_ctc + weights.seg * l_seg,
    })
}

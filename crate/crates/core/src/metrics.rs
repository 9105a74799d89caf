//! Confusion-matrix IoU for label grids (0 = background, k = class k).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cam::IGNORE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Background first, then each class. `None` where the class never
    /// appears in either prediction or ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Accumulates a `(c+1) × (c+1)` confusion matrix (rows = truth).
#[derive(Clone, Debug)]
pub struct Confusion {
    k: usize,
    counts: Array2<u64>,
    /// truth pixels whose prediction was IGNORE: (truth class, count)
    unlabeled: Vec<u64>,
}

impl Confusion {
    pub fn new(class_count: usize) -> Self {
        let k = class_count + 1;
        Self {
            k,
            counts: Array2::zeros((k, k)),
            unlabeled: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                truth.dim()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            if t == IGNORE {
                continue;
            }
            let t = t as usize;
            if t >= self.k {
                return Err(Error::shape(format!("truth label {t} outside {} classes", self.k)));
            }
            if p == IGNORE {
                self.unlabeled[t] += 1;
                continue;
            }
            let p = p as usize;
            if p >= self.k {
                return Err(Error::shape(format!("predicted label {p} outside {} classes", self.k)));
            }
            self.counts[[t, p]] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let mut per_class = Vec::with_capacity(self.k);
        for c in 0..self.k {
            let tp = self.counts[[c, c]];
            let fn_ = self.counts.row(c).sum() - tp + self.unlabeled[c];
            let fp = self.counts.column(c).sum() - tp;
            let union = tp + fn_ + fp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IoUReport {
            per_class_iou: per_class,
            miou,
        }
    }
}

/// mIoU over paired label grids; ground-truth IGNORE pixels are skipped.
pub fn miou(preds: &[Array2<u8>], gts: &[Array2<u8>], class_count: usize) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut conf = Confusion::new(class_count);
    for (p, t) in preds.iter().zip(gts) {
        conf.add(p.view(), t.view())?;
    }
    Ok(conf.report())
}

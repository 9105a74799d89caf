//! Patch token contrast: pairwise relations from pseudo token labels and the
//! cosine-similarity loss they supervise on the final patch tokens.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::cam::TokenLabelMap;
use crate::float::Float;

/// Guard for normalizing near-zero tokens.
pub const NORM_EPS: f64 = 1e-8;

/// Symmetric boolean masks over token pairs, diagonal excluded. Counts are
/// over unordered pairs (`i < j`).
#[derive(Clone, Debug, PartialEq)]
pub struct PairRelations {
    pub positive: Array2<bool>,
    pub negative: Array2<bool>,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn pairwise_relations(labels: &TokenLabelMap) -> PairRelations {
    let flat: Vec<_> = labels.iter().collect();
    let n = flat.len();
    let mut positive = Array2::from_elem((n, n), false);
    let mut negative = Array2::from_elem((n, n), false);
    let (mut n_pos, mut n_neg) = (0, 0);
    for i in 0..n {
        if !flat[i].is_reliable() {
            continue;
        }
        for j in i + 1..n {
            if !flat[j].is_reliable() {
                continue;
            }
            if flat[i] == flat[j] {
                positive[[i, j]] = true;
                positive[[j, i]] = true;
                n_pos += 1;
            } else {
                negative[[i, j]] = true;
                negative[[j, i]] = true;
                n_neg += 1;
            }
        }
    }
    PairRelations {
        positive,
        negative,
        n_pos,
        n_neg,
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PtcMode {
    /// plain cosine similarity
    Raw,
    /// `max(cos, 0)`
    Relu,
    /// `|cos|`
    #[default]
    Abs,
}

impl PtcMode {
    pub fn sim(self, cos: f64) -> f64 {
        match self {
            PtcMode::Raw => cos,
            PtcMode::Relu => cos.max(0.0),
            PtcMode::Abs => cos.abs(),
        }
    }

    fn dsim(self, cos: f64) -> f64 {
        match self {
            PtcMode::Raw => 1.0,
            PtcMode::Relu => f64::from(u8::from(cos > 0.0)),
            PtcMode::Abs => {
                if cos > 0.0 {
                    1.0
                } else if cos < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for PtcMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(PtcMode::Raw),
            "relu" => Ok(PtcMode::Relu),
            "abs" => Ok(PtcMode::Abs),
            other => Err(format!("unknown similarity mode {other:?}")),
        }
    }
}

fn unit_rows<T: Float>(f: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let eps = T::of(NORM_EPS);
    let norms: Array1<T> = f.rows().into_iter().map(|r| r.dot(&r).sqrt().max(eps)).collect();
    let unit = f / &norms.view().insert_axis(Axis(1));
    (unit, norms)
}

/// Token cosine-similarity matrix.
pub fn cosine_matrix<T: Float>(features: &TokenGrid<T>) -> Array2<T> {
    let (u, _) = unit_rows(&features.tokens);
    u.dot(&u.t())
}

pub fn ptc_loss<T: Float>(features: &TokenGrid<T>, rel: &PairRelations, mode: PtcMode) -> T {
    ptc_loss_grad(features, rel, mode).0
}

/// Loss and its gradient with respect to the tokens. An empty positive (or
/// negative) set contributes zero.
pub fn ptc_loss_grad<T: Float>(
    features: &TokenGrid<T>,
    rel: &PairRelations,
    mode: PtcMode,
) -> (T, Array2<T>) {
    let f = &features.tokens;
    let n = f.nrows();
    assert_eq!(rel.positive.nrows(), n, "relations sized for the token set");
    let (unit, norms) = unit_rows(f);
    let cos = unit.dot(&unit.t());
    let inv_pos = if rel.n_pos > 0 { 1.0 / rel.n_pos as f64 } else { 0.0 };
    let inv_neg = if rel.n_neg > 0 { 1.0 / rel.n_neg as f64 } else { 0.0 };

    let mut loss = 0.0;
    // coef[i, j] = dL/dcos(i, j) for each unordered pair, mirrored
    let mut coef = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let c = cos[[i, j]].as_f64();
            let g = if rel.positive[[i, j]] {
                loss += inv_pos * (1.0 - mode.sim(c));
                -inv_pos * mode.dsim(c)
            } else if rel.negative[[i, j]] {
                loss += inv_neg * mode.sim(c);
                inv_neg * mode.dsim(c)
            } else {
                continue;
            };
            coef[[i, j]] = T::of(g);
            coef[[j, i]] = T::of(g);
        }
    }
    let dunit = coef.dot(&unit);
    let eps = T::of(NORM_EPS);
    let mut grad = Array2::zeros(f.raw_dim());
    for i in 0..n {
        let g = crate::nn::l2_normalize_backward(unit.row(i), norms[i], eps, dunit.row(i));
        grad.row_mut(i).assign(&g);
    }
    (T::of(loss), grad)
}

//! The assembled network: backbone, two classifiers, projection heads and
//! segmentation decoder.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ForwardTrace, TokenGrid, Vit};
use crate::cam::{compute_cam, gmp_classify, ActivationMap};
use crate::ctc::ProjectionHead;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::{ParamId, ParamStore};
use crate::segmenter::config::TrainConfig;
use crate::segmenter::decoder::{upsample_logits, Decoder};

pub const CLS_HEAD: &str = "head.cls.weight";
pub const AUX_HEAD: &str = "head.aux.weight";
pub const LOCAL_PROJ: &str = "proj.local";
pub const GLOBAL_PROJ: &str = "proj.global";

/// Trainable weights live in `params`; the EMA-updated global projection head
/// lives in `ema` and never receives gradients.
#[derive(Clone, Debug)]
pub struct TocoModel<T> {
    pub params: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub vit: Vit,
    pub cls_head: ParamId,
    pub aux_head: ParamId,
    pub proj_local: ProjectionHead,
    pub proj_global: ProjectionHead,
    pub decoder: Decoder,
    classes: usize,
}

/// Everything inference produces for one image.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub trace: ForwardTrace<T>,
    pub logits: ndarray::Array1<T>,
    pub aux_logits: ndarray::Array1<T>,
    pub cam: ActivationMap<T>,
    pub aux_cam: ActivationMap<T>,
    /// `(c + 1) × H × W` decoder logits at image resolution.
    pub seg_logits: Array3<T>,
}

impl<T: Float> TocoModel<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(cfg.seed, 0, 0));
        let mut params = ParamStore::new();
        let vit = Vit::new(cfg.model.clone(), &mut params, &mut rng)?;
        let d = cfg.model.dim;
        let cls_head = params.trunc_normal(CLS_HEAD, &[cfg.classes, d], 0.02, &mut rng);
        let aux_head = params.trunc_normal(AUX_HEAD, &[cfg.classes, d], 0.02, &mut rng);
        let dims = (d, cfg.proj_hidden, cfg.proj_dim);
        let proj_local = ProjectionHead::new(&mut params, LOCAL_PROJ, dims, &mut rng);
        let decoder = Decoder::new(&mut params, d, cfg.decoder_hidden, cfg.classes + 1, &mut rng);

        // the global head starts as a copy of the local one
        let mut ema = ParamStore::new();
        for (&id, suffix) in proj_local.ids().iter().zip(PROJ_SUFFIXES) {
            ema.push(format!("{GLOBAL_PROJ}.{suffix}"), params.get(id).clone());
        }
        let proj_global = ProjectionHead::bind(&ema, GLOBAL_PROJ)?;
        Ok(Self {
            params,
            ema,
            vit,
            cls_head,
            aux_head,
            proj_local,
            proj_global,
            decoder,
            classes: cfg.classes,
        })
    }

    /// Rebinds handles over loaded stores, checking names and shapes.
    pub fn from_stores(cfg: &TrainConfig, params: ParamStore<T>, ema: ParamStore<T>) -> Result<Self> {
        let reference = TocoModel::<T>::new(cfg)?;
        for (label, want, got) in [("params", &reference.params, &params), ("ema", &reference.ema, &ema)] {
            if want.len() != got.len() {
                return Err(Error::shape(format!(
                    "{label}: {} tensors, expected {}",
                    got.len(),
                    want.len()
                )));
            }
            for ((wn, wv), (gn, gv)) in want.iter().zip(got.iter()) {
                if wn != gn || wv.shape() != gv.shape() {
                    return Err(Error::shape(format!(
                        "{label}: tensor {gn} {:?} does not match expected {wn} {:?}",
                        gv.shape(),
                        wv.shape()
                    )));
                }
            }
        }
        Ok(Self {
            vit: Vit::bind(cfg.model.clone(), &params)?,
            proj_local: ProjectionHead::bind(&params, LOCAL_PROJ)?,
            proj_global: ProjectionHead::bind(&ema, GLOBAL_PROJ)?,
            decoder: Decoder::bind(&params)?,
            cls_head: reference.cls_head,
            aux_head: reference.aux_head,
            params,
            ema,
            classes: cfg.classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn cast<U: Float>(&self) -> TocoModel<U> {
        TocoModel {
            params: self.params.cast(),
            ema: self.ema.cast(),
            vit: self.vit.clone(),
            cls_head: self.cls_head,
            aux_head: self.aux_head,
            proj_local: self.proj_local.clone(),
            proj_global: self.proj_global.clone(),
            decoder: self.decoder.clone(),
            classes: self.classes,
        }
    }

    pub fn aux_features(&self, trace: &ForwardTrace<T>) -> TokenGrid<T> {
        trace.patch_tokens(self.vit.config().aux_index())
    }

    /// Runs the full network. CAMs are restricted to `present` classes when
    /// given, otherwise to classes whose final logit is positive.
    pub fn infer(&self, image: ArrayView3<'_, T>, present: Option<&[bool]>) -> Result<Inference<T>> {
        let trace = self.vit.forward(&self.params, image)?;
        let f = trace.final_patch_tokens();
        let fm = self.aux_features(&trace);
        let out = gmp_classify(&f, self.params.mat(self.cls_head));
        let aux = gmp_classify(&fm, self.params.mat(self.aux_head));
        let predicted: Vec<bool> = out.logits.iter().map(|&v| v > T::zero()).collect();
        let present = present.map(<[bool]>::to_vec).unwrap_or(predicted);
        if present.len() != self.classes {
            return Err(Error::shape(format!(
                "{} presence flags for {} classes",
                present.len(),
                self.classes
            )));
        }
        let cam = compute_cam(&f, self.params.mat(self.cls_head), &present);
        let aux_cam = compute_cam(&fm, self.params.mat(self.aux_head), &present);
        let dec = self.decoder.forward(&self.params, &f);
        let (_, h, w) = image.dim();
        let (up, _) = upsample_logits(dec.logits.view(), f.grid, (h, w));
        let seg_logits = up
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.classes + 1, h, w))
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Inference {
            logits: out.logits,
            aux_logits: aux.logits,
            trace,
            cam,
            aux_cam,
            seg_logits,
        })
    }
}

pub(crate) const PROJ_SUFFIXES: [&str; 6] =
    ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"];

/// Per-pixel argmax over the channel axis of `(k) × H × W` logits.
pub fn argmax_labels<T: Float>(logits: &Array3<T>) -> Array2<u8> {
    logits.map_axis(Axis(0), |col| {
        let mut best = 0;
        for (i, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = i;
            }
        }
        best as u8
    })
}

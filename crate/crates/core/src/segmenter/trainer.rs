//! One optimizer step over a batch and the surrounding training loop.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenGrid;
use crate::cam::{
    cls_loss_grad, compute_cam, gmp_classify, gmp_classify_backward, token_pseudo_labels, upsample_nearest,
    ActivationMap, TokenLabelMap,
};
use crate::ctc::{crop_and_augment, ctc_loss_grad, ema_update, sample_crops, ContrastBatch, Polarity};
use crate::data::{derive_seed, Dataset, TrainItem};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::{AdamW, AdamWConfig, ParamStore};
use crate::ptc::{pairwise_relations, ptc_loss_grad};
use crate::segmenter::config::TrainConfig;
use crate::segmenter::decoder::upsample_logits;
use crate::segmenter::losses::{seg_loss_grad, total_loss, LossBreakdown, Regularizer};
use crate::segmenter::model::TocoModel;
use crate::segmenter::par::par_refine;
use crate::segmenter::schedule::lr_schedule;

const STREAM_SHUFFLE: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

pub const METRICS_HEADER: &str = "iteration,l_cls,l_cls_aux,l_ptc,l_ctc,l_seg,l_reg,total,lr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration, l.l_cls, l.l_cls_aux, l.l_ptc, l.l_ctc, l.l_seg, l.l_reg, l.total, self.lr
        )
    }
}

struct SampleOutcome<T> {
    parts: [f64; 5],
    l_reg: f64,
    grads: ParamStore<T>,
}

pub struct Trainer<T: Float> {
    cfg: TrainConfig,
    model: TocoModel<T>,
    opt: AdamW<T>,
    iter: usize,
    regularizer: Option<Box<dyn Regularizer<T>>>,
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let model = TocoModel::new(&cfg)?;
        Ok(Self::from_model(cfg, model))
    }

    pub fn from_model(cfg: TrainConfig, model: TocoModel<T>) -> Self {
        let o = &cfg.optimizer;
        let opt = AdamW::new(
            &model.params,
            AdamWConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
        );
        Self {
            cfg,
            model,
            opt,
            iter: 0,
            regularizer: None,
        }
    }

    pub fn with_regularizer(mut self, reg: Box<dyn Regularizer<T>>) -> Self {
        self.regularizer = Some(reg);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TocoModel<T> {
        &self.model
    }

    pub fn into_model(self) -> TocoModel<T> {
        self.model
    }

    /// Number of optimizer steps taken so far.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Batch-mean losses and parameter gradients at the current weights and
    /// iteration, without touching any state.
    pub fn compute_gradients(&self, batch: &[TrainItem<'_>]) -> Result<(LossBreakdown, ParamStore<T>)> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let base = self.iter * self.cfg.batch_size;
        let outcomes: Vec<Result<SampleOutcome<T>>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| self.sample_pass(item, derive_seed(self.cfg.seed, STREAM_SAMPLE, (base + i) as u64)))
            .collect();

        // reduce in batch order so results do not depend on scheduling
        let mut grads = self.model.params.zeros_like();
        let mut parts = [0.0; 5];
        let mut l_reg = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for outcome in outcomes {
            let o = outcome?;
            grads.add_scaled(&o.grads, T::of(inv));
            for (acc, v) in parts.iter_mut().zip(o.parts) {
                *acc += inv * v;
            }
            l_reg += inv * o.l_reg;
        }
        let mut losses = total_loss(parts, self.cfg.lambda)?;
        if !l_reg.is_finite() {
            return Err(Error::NonFinite {
                location: "l_reg".into(),
                detail: format!("regularizer returned {l_reg}"),
            });
        }
        losses.l_reg = l_reg;
        losses.total += l_reg;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                location: format!("gradient of {name}"),
                detail: format!("at iteration {}", self.iter),
            });
        }
        Ok((losses, grads))
    }

    /// Forward, backward, AdamW update and EMA of the global head.
    pub fn train_step(&mut self, batch: &[TrainItem<'_>]) -> Result<StepReport> {
        let (losses, grads) = self.compute_gradients(batch)?;
        let lr = lr_schedule(self.iter, &self.cfg.schedule);
        self.opt.step(&mut self.model.params, &grads, lr);
        let local = self.model.proj_local.tensors(&self.model.params);
        ema_update(self.model.ema.values_mut(), &local, self.cfg.rho)?;
        let report = StepReport {
            iteration: self.iter,
            lr,
            losses,
        };
        self.iter += 1;
        Ok(report)
    }

    /// Dataset indices for iteration `t`: consecutive slices of a stream of
    /// per-epoch seeded permutations.
    pub fn batch_indices(&self, t: usize, dataset_len: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in t * b..(t + 1) * b {
            let (epoch, pos) = (k / dataset_len, k % dataset_len);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_SHUFFLE, epoch as u64));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("permutation cached").1[pos]);
        }
        out
    }

    /// Runs until `total_iters` steps have been taken, calling `on_step`
    /// after each one.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        if data.classes != self.cfg.classes {
            return Err(Error::config(format!(
                "dataset has {} classes, model {}",
                data.classes, self.cfg.classes
            )));
        }
        while self.iter < self.cfg.schedule.total_iters {
            let idx = self.batch_indices(self.iter, data.len());
            let batch: Vec<TrainItem<'_>> = idx.iter().map(|&i| data.samples[i].training_view()).collect();
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    fn sample_pass(&self, item: &TrainItem<'_>, seed: u64) -> Result<SampleOutcome<T>> {
        let cfg = &self.cfg;
        let m = &self.model;
        if item.labels.len() != cfg.classes {
            return Err(Error::shape(format!(
                "{} image labels for {} classes",
                item.labels.len(),
                cfg.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image: Array3<T> = item.image.mapv(|v| T::of(f64::from(v)));
        let (_, h, w) = image.dim();
        let mut grads = m.params.zeros_like();

        let trace = m.vit.forward(&m.params, image.view())?;
        let depth = trace.depth();
        let aux_k = cfg.model.aux_index();
        let f = trace.final_patch_tokens();
        let fm = trace.patch_tokens(aux_k);

        // classification on both branches
        let out = gmp_classify(&f, m.params.mat(m.cls_head));
        let (l_cls, dlogits) = cls_loss_grad(out.logits.view(), item.labels);
        let mut df = gmp_classify_backward(&f, m.params.mat(m.cls_head), &out, dlogits.view(), grads.mat_mut(m.cls_head));
        let aux = gmp_classify(&fm, m.params.mat(m.aux_head));
        let (l_aux, dlogits_aux) = cls_loss_grad(aux.logits.view(), item.labels);
        let dfm = gmp_classify_backward(
            &fm,
            m.params.mat(m.aux_head),
            &aux,
            dlogits_aux.view(),
            grads.mat_mut(m.aux_head),
        );

        // pseudo token labels from the auxiliary CAM (no gradient)
        let need_aux_labels = cfg.lambda.ptc > 0.0 || cfg.lambda.ctc > 0.0;
        let y_aux: Option<TokenLabelMap> = if need_aux_labels {
            let cam = compute_cam(&fm, m.params.mat(m.aux_head), item.labels);
            Some(token_pseudo_labels(&cam, cfg.thresholds)?)
        } else {
            None
        };

        let mut l_ptc = 0.0;
        if cfg.lambda.ptc > 0.0 {
            let rel = pairwise_relations(y_aux.as_ref().expect("labels computed"));
            let (l, g) = ptc_loss_grad(&f, &rel, cfg.ptc_mode);
            l_ptc = l.as_f64();
            df.scaled_add(T::of(cfg.lambda.ptc), &g);
        }

        let mut l_seg = 0.0;
        let mut l_reg = 0.0;
        if cfg.lambda.seg > 0.0 || self.regularizer.is_some() {
            let labels = self.seg_targets(&f, image.view(), item.labels)?;
            let dec = m.decoder.forward(&m.params, &f);
            let mut dlog = Array2::zeros(dec.logits.raw_dim());
            if cfg.lambda.seg > 0.0 {
                let (up, r) = upsample_logits(dec.logits.view(), f.grid, (h, w));
                let flat = labels.into_shape_with_order(h * w).map_err(|e| Error::shape(e.to_string()))?;
                let (l, dup) = seg_loss_grad(up.view(), flat.view());
                l_seg = l.as_f64();
                dlog.scaled_add(T::of(cfg.lambda.seg), &r.t().dot(&dup));
            }
            if let Some(reg) = &self.regularizer {
                let (l, g) = reg.evaluate(dec.logits.view());
                l_reg = l.as_f64();
                dlog += &g;
            }
            let g = m.decoder.backward(&m.params, &dec, dlog.view(), &mut grads);
            df += &g;
        }

        let mut token_grads: Vec<Option<Array2<T>>> = vec![None; depth];
        let embed = |g: &Array2<T>| {
            let mut full = Array2::zeros((g.nrows() + 1, g.ncols()));
            full.slice_mut(s![1.., ..]).assign(g);
            full
        };
        token_grads[depth - 1] = Some(embed(&df));
        match &mut token_grads[aux_k] {
            Some(existing) => existing.slice_mut(s![1.., ..]).scaled_add(T::one(), &dfm),
            slot => *slot = Some(embed(&dfm)),
        }
        m.vit.backward(&m.params, &trace, &token_grads, &mut grads)?;

        let mut l_ctc = 0.0;
        if cfg.lambda.ctc > 0.0 {
            let y = y_aux.as_ref().expect("labels computed");
            l_ctc = self.contrast_locals(&image, trace.final_class_token(), y, &mut rng, &mut grads)?;
        }

        Ok(SampleOutcome {
            parts: [l_cls.as_f64(), l_aux.as_f64(), l_ptc, l_ctc, l_seg],
            l_reg,
            grads,
        })
    }

    /// Pixel targets for the decoder: final CAM upsampled to the image,
    /// refined with PAR together with a `1 − max` background plane, then
    /// split by the dual thresholds (uncertain pixels ignored).
    fn seg_targets(&self, f: &TokenGrid<T>, image: ndarray::ArrayView3<'_, T>, labels: &[bool]) -> Result<Array2<u8>> {
        let m = &self.model;
        let (_, h, w) = image.dim();
        let cam = compute_cam(f, m.params.mat(m.cls_head), labels);
        let c = cam.classes();
        let mut stack = Array3::<T>::zeros((c + 1, h, w));
        for k in 0..c {
            let plane = upsample_nearest(&cam.values.index_axis(Axis(0), k).to_owned(), (h, w));
            stack.index_axis_mut(Axis(0), k + 1).assign(&plane);
        }
        let fg_max = stack.slice(s![1.., .., ..]).fold_axis(Axis(0), T::zero(), |a, &v| a.max(v));
        stack.index_axis_mut(Axis(0), 0).assign(&fg_max.mapv(|v| T::one() - v));
        let refined = par_refine(image, stack.view(), &self.cfg.par)?;
        let planes = ActivationMap {
            values: refined.slice(s![1.., .., ..]).to_owned(),
            present: cam.present.clone(),
        };
        Ok(token_pseudo_labels(&planes, self.cfg.thresholds)?.codes())
    }

    /// Encodes local crops, contrasts their projected class tokens against
    /// the detached global projection, and backpropagates into the shared
    /// encoder and the local head. Returns the (unweighted) loss.
    fn contrast_locals(
        &self,
        image: &Array3<T>,
        global_cls: ndarray::ArrayView1<'_, T>,
        y: &TokenLabelMap,
        rng: &mut ChaCha8Rng,
        grads: &mut ParamStore<T>,
    ) -> Result<f64> {
        let cfg = &self.cfg;
        let m = &self.model;
        let (_, h, w) = image.dim();
        let crops = sample_crops(y, (h, w), &cfg.crop, rng)?;
        if !crops.iter().any(|c| c.polarity == Polarity::Positive) {
            return Ok(0.0);
        }
        let p = m.proj_global.project(&m.ema, global_cls);
        let mut traces = Vec::with_capacity(crops.len());
        let mut cls = Array2::zeros((crops.len(), cfg.model.dim));
        for (i, crop) in crops.iter().enumerate() {
            let local = crop_and_augment(image.view(), crop, &cfg.crop, cfg.augment, rng)?;
            let t = m.vit.forward(&m.params, local.view())?;
            cls.row_mut(i).assign(&t.final_class_token());
            traces.push(t);
        }
        let proj = m.proj_local.forward(&m.params, cls.view());
        let pos: Vec<usize> = (0..crops.len()).filter(|&i| crops[i].polarity == Polarity::Positive).collect();
        let neg: Vec<usize> = (0..crops.len()).filter(|&i| crops[i].polarity == Polarity::Negative).collect();
        let batch = ContrastBatch {
            p,
            q_pos: proj.out.select(Axis(0), &pos),
            q_neg: proj.out.select(Axis(0), &neg),
        };
        let g = ctc_loss_grad(&batch, cfg.tau, cfg.eps)?;
        let lambda = T::of(cfg.lambda.ctc);
        let mut dq = Array2::zeros(proj.out.raw_dim());
        for (row, &i) in pos.iter().enumerate() {
            dq.row_mut(i).assign(&(&g.dq_pos.row(row) * lambda));
        }
        for (row, &i) in neg.iter().enumerate() {
            dq.row_mut(i).assign(&(&g.dq_neg.row(row) * lambda));
        }
        let dcls = m.proj_local.backward(&m.params, &proj, dq.view(), grads);
        let depth = cfg.model.depth;
        for (i, t) in traces.iter().enumerate() {
            let mut last = Array2::zeros(t.tokens[depth - 1].raw_dim());
            last.row_mut(0).assign(&dcls.row(i));
            let mut token_grads: Vec<Option<Array2<T>>> = vec![None; depth];
            token_grads[depth - 1] = Some(last);
            m.vit.backward(&m.params, t, &token_grads, grads)?;
        }
        Ok(g.loss.as_f64())
    }
}

/// Appends step rows to a metrics CSV, writing the header first.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut file = std::io::BufWriter::new(f);
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, report: &StepReport) -> Result<()> {
        writeln!(self.file, "{}", report.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

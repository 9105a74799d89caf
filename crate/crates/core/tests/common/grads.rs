//! Central finite differences against every hand-written backward pass, in
//! f64. Each check panics on the first coordinate over tolerance.

use std::cell::Cell;

use super::{rng, tiny_config, uniform2, uniform3};
use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use toco_core::backbone::{TokenGrid, Vit, VitConfig};
use toco_core::cam::{cls_loss_grad, gmp_classify, gmp_classify_backward, TokenLabel, TokenLabelMap};
use toco_core::ctc::{ctc_loss_grad, ContrastBatch, ProjectionHead};
use toco_core::data::gen_shapes_dataset;
use toco_core::params::ParamStore;
use toco_core::ptc::{pairwise_relations, ptc_loss_grad, PtcMode};
use toco_core::segmenter::decoder::{upsample_logits, Decoder};
use toco_core::segmenter::losses::seg_loss_grad;
use toco_core::segmenter::{TocoModel, Trainer};

thread_local! {
    static WORST: Cell<f64> = const { Cell::new(0.0) };
}

/// Largest relative error seen on this thread since the last call.
pub fn take_worst() -> f64 {
    WORST.with(|w| w.replace(0.0))
}

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error with an absolute floor so that coordinates whose true
/// derivative is ~0 are judged on absolute deviation.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Checks `grad` against central differences of `f` at `x`, optionally only
/// at `coords`.
fn check(x: &[f64], grad: &[f64], coords: Option<&[usize]>, mut f: impl FnMut(&[f64]) -> f64, what: &str) -> f64 {
    assert_eq!(x.len(), grad.len(), "{what}: gradient length");
    let all: Vec<usize> = (0..x.len()).collect();
    let mut worst: f64 = 0.0;
    let mut xv = x.to_vec();
    for &i in coords.unwrap_or(&all) {
        let orig = xv[i];
        xv[i] = orig + H;
        let up = f(&xv);
        xv[i] = orig - H;
        let down = f(&xv);
        xv[i] = orig;
        let fd = (up - down) / (2.0 * H);
        let e = rel(fd, grad[i]);
        assert!(e < TOL, "{what}[{i}]: analytic {} vs numeric {fd} (rel {e:e})", grad[i]);
        worst = worst.max(e);
        WORST.with(|w| w.set(w.get().max(e)));
    }
    worst
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn random_labels(seed: u64, grid: (usize, usize), classes: usize) -> TokenLabelMap {
    let mut r = rng(seed);
    TokenLabelMap {
        labels: Array2::from_shape_simple_fn(grid, || match r.gen_range(0..classes + 2) {
            0 => TokenLabel::Background,
            1 => TokenLabel::Uncertain,
            k => TokenLabel::Foreground(k - 2),
        }),
    }
}

pub fn classification_loss_through_max_pooling() {
    let mut r = rng(1);
    let f = uniform2(&mut r, (6, 5), -1.0, 1.0);
    let w = uniform2(&mut r, (3, 5), -1.0, 1.0);
    let labels = [true, false, true];
    let loss = |f: &Array2<f64>, w: &Array2<f64>| {
        let out = gmp_classify(&TokenGrid::new(f.clone(), (2, 3)).unwrap(), w.view());
        cls_loss_grad(out.logits.view(), &labels).0
    };
    let grid = TokenGrid::new(f.clone(), (2, 3)).unwrap();
    let out = gmp_classify(&grid, w.view());
    let (_, dlogits) = cls_loss_grad(out.logits.view(), &labels);
    let mut dw = Array2::zeros(w.raw_dim());
    let df = gmp_classify_backward(&grid, w.view(), &out, dlogits.view(), dw.view_mut());
    check(&flat(&f), &flat(&df), None, |x| loss(&Array2::from_shape_vec((6, 5), x.to_vec()).unwrap(), &w), "dF");
    check(&flat(&w), &flat(&dw), None, |x| loss(&f, &Array2::from_shape_vec((3, 5), x.to_vec()).unwrap()), "dW");
}

pub fn token_contrast_all_modes() {
    for (seed, mode) in [(10, PtcMode::Abs), (11, PtcMode::Relu), (12, PtcMode::Raw)] {
        let f = uniform2(&mut rng(seed), (9, 4), -1.0, 1.0);
        let rel = pairwise_relations(&random_labels(seed + 100, (3, 3), 2));
        let (_, g) = ptc_loss_grad(&TokenGrid::new(f.clone(), (3, 3)).unwrap(), &rel, mode);
        check(
            &flat(&f),
            &flat(&g),
            None,
            |x| ptc_loss_grad(&TokenGrid::new(Array2::from_shape_vec((9, 4), x.to_vec()).unwrap(), (3, 3)).unwrap(), &rel, mode).0,
            &format!("ptc {mode:?}"),
        );
    }
}

pub fn class_token_contrast() {
    let mut r = rng(20);
    let (d, np, nn) = (5, 3, 4);
    let p = Array1::from_shape_simple_fn(d, || r.gen_range(-1.0..1.0));
    let qp = uniform2(&mut r, (np, d), -1.0, 1.0);
    let qn = uniform2(&mut r, (nn, d), -1.0, 1.0);
    let (tau, eps) = (0.5, 1e-8);
    let batch = ContrastBatch {
        p: p.clone(),
        q_pos: qp.clone(),
        q_neg: qn.clone(),
    };
    let g = ctc_loss_grad(&batch, tau, eps).unwrap();
    let eval = |p: &[f64], qp: &[f64], qn: &[f64]| {
        let b = ContrastBatch {
            p: Array1::from(p.to_vec()),
            q_pos: Array2::from_shape_vec((np, d), qp.to_vec()).unwrap(),
            q_neg: Array2::from_shape_vec((nn, d), qn.to_vec()).unwrap(),
        };
        ctc_loss_grad(&b, tau, eps).unwrap().loss
    };
    let (fp, fqp, fqn) = (flat(&p), flat(&qp), flat(&qn));
    check(&fp, &flat(&g.dp), None, |x| eval(x, &fqp, &fqn), "dp");
    check(&fqp, &flat(&g.dq_pos), None, |x| eval(&fp, x, &fqn), "dq+");
    check(&fqn, &flat(&g.dq_neg), None, |x| eval(&fp, &fqp, x), "dq-");
}

pub fn segmentation_cross_entropy_and_decoder() {
    let mut r = rng(30);
    let (grid, c, k, out) = ((3, 3), 4, 3, (6, 6));
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, c, 5, k, &mut rng(31));
    for v in store.values_mut() {
        v.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    }
    let f = uniform2(&mut r, (9, c), -1.0, 1.0);
    let labels = Array1::from_shape_simple_fn(36, || if r.gen_bool(0.2) { 255u8 } else { r.gen_range(0..k as u8) });

    let loss = |store: &ParamStore<f64>, f: &Array2<f64>| {
        let cache = dec.forward(store, &TokenGrid::new(f.clone(), grid).unwrap());
        let (up, _) = upsample_logits(cache.logits.view(), grid, out);
        seg_loss_grad(up.view(), labels.view()).0
    };
    let cache = dec.forward(&store, &TokenGrid::new(f.clone(), grid).unwrap());
    let (up, rmat) = upsample_logits(cache.logits.view(), grid, out);
    let (_, dup) = seg_loss_grad(up.view(), labels.view());
    let mut grads = store.zeros_like();
    let df = dec.backward(&store, &cache, rmat.t().dot(&dup).view(), &mut grads);

    check(&flat(&f), &flat(&df), None, |x| loss(&store, &Array2::from_shape_vec((9, c), x.to_vec()).unwrap()), "dF");
    for (i, name) in store.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>().iter().enumerate() {
        let id = store.id_of(name).unwrap();
        let shape = store.get(id).raw_dim();
        let x = flat(store.get(id));
        let mut probe = store.clone();
        check(&x, &flat(grads.get(id)), None, |v| {
            *probe.get_mut(id) = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
            loss(&probe, &f)
        }, &format!("decoder tensor {i} {name}"));
    }

    // logits directly
    let lg = uniform2(&mut r, (36, k), -2.0, 2.0);
    let (_, g) = seg_loss_grad(lg.view(), labels.view());
    check(&flat(&lg), &flat(&g), None, |x| seg_loss_grad(Array2::from_shape_vec((36, k), x.to_vec()).unwrap().view(), labels.view()).0, "dlogits");
}

pub fn projection_head() {
    let mut r = rng(40);
    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut store, "h", (5, 6, 3), &mut rng(41));
    for v in store.values_mut() {
        v.mapv_inplace(|_| r.gen_range(-0.8..0.8));
    }
    let x = uniform2(&mut r, (4, 5), -1.0, 1.0);
    let g = uniform2(&mut r, (4, 3), -1.0, 1.0);
    let obj = |store: &ParamStore<f64>, x: &Array2<f64>| (&head.forward(store, x.view()).out * &g).sum();
    let cache = head.forward(&store, x.view());
    let mut grads = store.zeros_like();
    let dx = head.backward(&store, &cache, g.view(), &mut grads);
    check(&flat(&x), &flat(&dx), None, |v| obj(&store, &Array2::from_shape_vec((4, 5), v.to_vec()).unwrap()), "dx");
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).raw_dim();
        let mut probe = store.clone();
        check(&flat(store.get(id)), &flat(grads.get(id)), None, |v| {
            *probe.get_mut(id) = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
            obj(&probe, &x)
        }, store.name(id));
    }
}

pub fn vit_check(cfg: VitConfig, seed: u64, coords_per_tensor: Option<usize>) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let vit = Vit::new(cfg.clone(), &mut store, &mut rng(seed + 1)).unwrap();
    for v in store.values_mut() {
        v.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    }
    let side = cfg.image_size;
    let img = uniform3(&mut r, (3, side, side), 0.0, 1.0);
    let trace = vit.forward(&store, img.view()).unwrap();
    // a random linear read-out on every block's tokens
    let weights: Vec<Array2<f64>> = trace.tokens.iter().map(|t| uniform2(&mut r, t.dim(), -1.0, 1.0)).collect();
    let obj = |store: &ParamStore<f64>, img: &ndarray::Array3<f64>| {
        let t = vit.forward(store, img.view()).unwrap();
        t.tokens.iter().zip(&weights).map(|(a, w)| (a * w).sum()).sum::<f64>()
    };
    let mut grads = store.zeros_like();
    let token_grads: Vec<Option<Array2<f64>>> = weights.iter().cloned().map(Some).collect();
    let dimg = vit.backward(&store, &trace, &token_grads, &mut grads).unwrap();

    let pick = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(k) = coords_per_tensor {
            idx.shuffle(r);
            idx.truncate(k);
        }
        idx
    };
    let coords = pick(img.len(), &mut r);
    check(&flat(&img), &flat(&dimg), Some(&coords), |v| {
        obj(&store, &ndarray::Array3::from_shape_vec(img.raw_dim(), v.to_vec()).unwrap())
    }, "image");
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).raw_dim();
        let coords = pick(store.get(id).len(), &mut r);
        let mut probe = store.clone();
        check(&flat(store.get(id)), &flat(grads.get(id)), Some(&coords), |v| {
            *probe.get_mut(id) = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
            obj(&probe, &img)
        }, store.name(id));
    }
}

pub fn backbone_depth_one() {
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 8,
        depth: 1,
        dim: 4,
        heads: 2,
        mlp_ratio: 2.0,
        aux_block: 1,
        channels: 3,
    };
    vit_check(cfg, 50, None);
}

pub fn backbone_two_blocks_with_resampled_positions() {
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        aux_block: 1,
        channels: 3,
    };
    vit_check(cfg.clone(), 60, Some(12));

    // a smaller input than the position table forces bilinear resampling
    let mut r = rng(70);
    let mut store = ParamStore::<f64>::new();
    let vit = Vit::new(cfg, &mut store, &mut rng(71)).unwrap();
    for v in store.values_mut() {
        v.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    }
    let img = uniform3(&mut r, (3, 8, 12), 0.0, 1.0);
    let trace = vit.forward(&store, img.view()).unwrap();
    let w = uniform2(&mut r, trace.tokens[1].dim(), -1.0, 1.0);
    let mut grads = store.zeros_like();
    vit.backward(&store, &trace, &[None, Some(w.clone())], &mut grads).unwrap();
    let id = store.id_of("vit.pos_embed").unwrap();
    let shape = store.get(id).raw_dim();
    let mut probe = store.clone();
    check(&flat(store.get(id)), &flat(grads.get(id)), None, |v| {
        *probe.get_mut(id) = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
        (&vit.forward(&probe, img.view()).unwrap().tokens[1] * &w).sum()
    }, "pos_embed");
}

fn trainer_setup(ctc: f64) -> (toco_core::segmenter::TrainConfig, toco_core::data::Dataset, TocoModel<f64>) {
    let mut cfg = tiny_config();
    cfg.lambda.ptc = 0.3;
    cfg.lambda.ctc = ctc;
    cfg.lambda.seg = 0.2;
    cfg.thresholds.low = 0.4;
    cfg.thresholds.high = 0.8;
    cfg.crop.n_crops = 6;
    cfg.crop.local_size = 8;
    cfg.par.iters = 2;
    let data = gen_shapes_dataset(2, cfg.classes, cfg.model.image_size, 5).unwrap();
    let mut model = TocoModel::<f64>::new(&cfg).unwrap();
    let mut r = rng(80);
    for v in model.params.values_mut() {
        v.mapv_inplace(|x| x + r.gen_range(-0.05..0.05));
    }
    (cfg, data, model)
}

/// Checks two random coordinates of every tensor accepted by `select`.
pub fn trainer_check(ctc: f64, select: impl Fn(&str) -> bool) -> usize {
    let (cfg, data, model) = trainer_setup(ctc);
    let items: Vec<_> = data.samples.iter().map(|s| s.training_view()).collect();
    let (losses, grads) = Trainer::from_model(cfg.clone(), model.clone()).compute_gradients(&items).unwrap();
    assert!(losses.l_ptc > 0.0 && losses.l_seg > 0.0, "{losses:?}");
    assert_eq!(losses.l_ctc > 0.0, ctc > 0.0, "{losses:?}");

    let total = |m: &TocoModel<f64>| Trainer::from_model(cfg.clone(), m.clone()).compute_gradients(&items).unwrap().0.total;
    let mut r = rng(81);
    let mut checked = 0;
    for id in model.params.ids().collect::<Vec<_>>() {
        if !select(model.params.name(id)) {
            continue;
        }
        let n = model.params.get(id).len();
        let coords: Vec<usize> = (0..2).map(|_| r.gen_range(0..n)).collect();
        let mut probe = model.clone();
        let x = flat(model.params.get(id));
        let shape = model.params.get(id).raw_dim();
        check(&x, &flat(grads.get(id)), Some(&coords), |v| {
            *probe.params.get_mut(id) = ArrayD::from_shape_vec(shape.clone(), v.to_vec()).unwrap();
            total(&probe)
        }, model.params.name(id));
        checked += coords.len();
    }
    checked
}

/// The trainer's summed gradient against differences of its reported total
/// loss with classification, token contrast and segmentation on. Pseudo-labels
/// and seg targets are detached, so the total is smooth in the weights away
/// from label flips.
pub fn whole_objective_through_trainer() {
    let n = trainer_check(0.0, |_| true);
    assert!(n > 50, "{n} coordinates");
}

/// With class-token contrast on, the anchor `p` comes from the global head
/// applied to the full-image class token and is treated as a constant, so
/// the backbone gradient deliberately differs from a finite difference of
/// the total. Tensors downstream of the anchor are still exact.
pub fn class_token_contrast_through_trainer() {
    let n = trainer_check(0.4, |name| !name.starts_with("vit."));
    assert!(n > 10, "{n} coordinates");
}

/// The global head only moves through the EMA: with ρ = 1 a training step
/// leaves it bit-identical while the local head changes.
pub fn global_head_receives_no_gradient() {
    let mut cfg = tiny_config();
    cfg.rho = 1.0;
    cfg.lambda.ctc = 1.0;
    let data = gen_shapes_dataset(2, cfg.classes, cfg.model.image_size, 6).unwrap();
    let items: Vec<_> = data.samples.iter().map(|s| s.training_view()).collect();
    let mut trainer = Trainer::<f64>::new(cfg).unwrap();
    let before = trainer.model().clone();
    for _ in 0..3 {
        trainer.train_step(&items).unwrap();
    }
    let after = trainer.model();
    assert_eq!(before.ema.values(), after.ema.values());
    let moved = before
        .proj_local
        .tensors(&before.params)
        .iter()
        .zip(after.proj_local.tensors(&after.params))
        .any(|(a, b)| *a != b);
    assert!(moved, "local head should train");
    // the gradient store carries no global-head tensors at all
    let (_, grads) = Trainer::from_model(trainer.config().clone(), after.clone()).compute_gradients(&items).unwrap();
    assert!(grads.iter().all(|(n, _)| !n.starts_with("proj.global")));
}

//! C interface. Every function returns a [`TocoStatus`]; on failure the
//! message is available from [`toco_last_error`] on the same thread.
//! Models are opaque handles released with [`toco_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3};
use toco_core::backbone::{mean_pairwise_cosine, TokenGrid};
use toco_core::cam::{TokenLabel, TokenLabelMap};
use toco_core::ctc::{ctc_loss, ContrastBatch};
use toco_core::diagnostics::predict;
use toco_core::ptc::{pairwise_relations, ptc_loss, PtcMode};
use toco_core::segmenter::TrainConfig;
use toco_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TocoStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    EmptyPositives = 7,
    Data = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TocoSimilarity {
    Raw = 0,
    Relu = 1,
    Abs = 2,
}

/// Opaque model handle.
pub struct TocoModel {
    inner: toco_core::segmenter::TocoModel<f32>,
    config: TrainConfig,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TocoModelInfo {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub aux_block: usize,
    pub classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(TocoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => TocoStatus::Shape,
            Error::Config(_) | Error::Thresholds { .. } => TocoStatus::Config,
            Error::NonFinite { .. } => TocoStatus::NonFinite,
            Error::EmptyPositives => TocoStatus::EmptyPositives,
            Error::Data { .. } => TocoStatus::Data,
            Error::Checkpoint { .. } => TocoStatus::Checkpoint,
            Error::Io { .. } => TocoStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TocoStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TocoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TocoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            TocoStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

unsafe fn model_ref<'a>(model: *const TocoModel) -> Result<&'a TocoModel, Failure> {
    // SAFETY: non-null handles come from `toco_model_*` constructors.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn shape_err(e: ndarray::ShapeError) -> Failure {
    Failure(TocoStatus::Shape, e.to_string())
}

/// Message describing the last failure on this thread (empty after success).
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn toco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint from its JSON manifest path.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn toco_model_load(manifest_path: *const c_char, out: *mut *mut TocoModel) -> TocoStatus {
    guard(|| {
        if manifest_path.is_null() {
            return Err(null("manifest_path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(manifest_path) }
            .to_str()
            .map_err(|e| Failure(TocoStatus::Config, format!("path is not UTF-8: {e}")))?;
        let (config, _, inner) = toco_core::checkpoint::load::<f32>(Path::new(path))?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(TocoModel { inner, config })) };
        Ok(())
    })
}

/// Creates a freshly initialized desk-preset model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn toco_model_new_desk(seed: u64, out: *mut *mut TocoModel) -> TocoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = TrainConfig::desk();
        config.seed = seed;
        let inner = toco_core::segmenter::TocoModel::new(&config)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(TocoModel { inner, config })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a `toco_model_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn toco_model_free(model: *mut TocoModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the pointer created by Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn toco_model_info(model: *const TocoModel, out: *mut TocoModelInfo) -> TocoStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        // SAFETY: the caller provides a writable struct.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let v = &m.config.model;
        *out = TocoModelInfo {
            image_size: v.image_size,
            patch_size: v.patch_size,
            depth: v.depth,
            dim: v.dim,
            aux_block: v.aux_block,
            classes: m.config.classes,
        };
        Ok(())
    })
}

unsafe fn image_view<'a>(image: *const f32, height: usize, width: usize) -> Result<ArrayView3<'a, f32>, Failure> {
    let data = unsafe { slice(image, 3 * height * width, "image") }?;
    ArrayView3::from_shape((3, height, width), data).map_err(shape_err)
}

/// Class activation maps for the classes flagged in `labels` (`classes`
/// bytes, nonzero = present). Writes `classes × (H/p) × (W/p)` values to
/// `out`, from the final block or, when `aux` is nonzero, the auxiliary one.
///
/// # Safety
/// `image` holds `3·height·width` floats (channel-major), `labels` holds
/// `classes` bytes and `out` has room for the maps.
#[no_mangle]
pub unsafe extern "C" fn toco_model_cam(
    model: *const TocoModel,
    image: *const f32,
    height: usize,
    width: usize,
    labels: *const u8,
    aux: i32,
    out: *mut f32,
) -> TocoStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let img = unsafe { image_view(image, height, width) }?;
        let c = m.config.classes;
        let present: Vec<bool> = unsafe { slice(labels, c, "labels") }?.iter().map(|&b| b != 0).collect();
        let inf = m.inner.infer(img, Some(&present))?;
        let cam = if aux != 0 { &inf.aux_cam } else { &inf.cam };
        let dst = unsafe { slice_mut(out, cam.values.len(), "out") }?;
        for (d, &v) in dst.iter_mut().zip(cam.values.iter()) {
            *d = v;
        }
        Ok(())
    })
}

/// Decoder prediction: one label per pixel (0 = background, k = class k).
///
/// # Safety
/// `image` holds `3·height·width` floats and `out` has `height·width` bytes.
#[no_mangle]
pub unsafe extern "C" fn toco_model_predict(
    model: *const TocoModel,
    image: *const f32,
    height: usize,
    width: usize,
    out: *mut u8,
) -> TocoStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let img = unsafe { image_view(image, height, width) }?;
        let p = predict(&m.inner, img, m.config.eval_bg_threshold)?;
        let dst = unsafe { slice_mut(out, height * width, "out") }?;
        for (d, &v) in dst.iter_mut().zip(p.seg.iter()) {
            *d = v;
        }
        Ok(())
    })
}

/// Mean pairwise cosine similarity of patch tokens after each block;
/// writes `depth` values.
///
/// # Safety
/// `image` holds `3·height·width` floats and `out` has `depth` doubles.
#[no_mangle]
pub unsafe extern "C" fn toco_model_block_similarity(
    model: *const TocoModel,
    image: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> TocoStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let img = unsafe { image_view(image, height, width) }?;
        let trace = m.inner.vit.forward(&m.inner.params, img)?;
        let dst = unsafe { slice_mut(out, trace.depth(), "out") }?;
        for (k, d) in dst.iter_mut().enumerate() {
            *d = mean_pairwise_cosine(trace.patch_tokens(k).tokens.view());
        }
        Ok(())
    })
}

fn token_label(code: u8) -> TokenLabel {
    match code {
        0 => TokenLabel::Background,
        255 => TokenLabel::Uncertain,
        k => TokenLabel::Foreground(usize::from(k) - 1),
    }
}

/// Patch-token contrast loss for `n × dim` features (row-major) and one
/// label code per token (0 = background, k = class k, 255 = uncertain).
///
/// # Safety
/// `features` holds `n·dim` doubles, `codes` holds `n` bytes, `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn toco_ptc_loss(
    features: *const f64,
    n: usize,
    dim: usize,
    codes: *const u8,
    mode: TocoSimilarity,
    out: *mut f64,
) -> TocoStatus {
    guard(|| {
        let f = unsafe { slice(features, n * dim, "features") }?;
        let codes = unsafe { slice(codes, n, "codes") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let tokens = Array2::from_shape_vec((n, dim), f.to_vec()).map_err(shape_err)?;
        let grid = TokenGrid::new(tokens, (1, n))?;
        let labels = TokenLabelMap {
            labels: Array2::from_shape_fn((1, n), |(_, i)| token_label(codes[i])),
        };
        let mode = match mode {
            TocoSimilarity::Raw => PtcMode::Raw,
            TocoSimilarity::Relu => PtcMode::Relu,
            TocoSimilarity::Abs => PtcMode::Abs,
        };
        *out = ptc_loss(&grid, &pairwise_relations(&labels), mode);
        Ok(())
    })
}

/// Class-token contrast (InfoNCE) for anchor `p` (`dim`), `n_pos` positive
/// and `n_neg` negative keys (row-major).
///
/// # Safety
/// Buffers hold the stated number of doubles; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn toco_ctc_loss(
    p: *const f64,
    q_pos: *const f64,
    n_pos: usize,
    q_neg: *const f64,
    n_neg: usize,
    dim: usize,
    tau: f64,
    eps: f64,
    out: *mut f64,
) -> TocoStatus {
    guard(|| {
        let p = unsafe { slice(p, dim, "p") }?;
        let qp = unsafe { slice(q_pos, n_pos * dim, "q_pos") }?;
        let qn = unsafe { slice(q_neg, n_neg * dim, "q_neg") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let batch = ContrastBatch {
            p: ndarray::Array1::from(p.to_vec()),
            q_pos: ArrayView2::from_shape((n_pos, dim), qp).map_err(shape_err)?.to_owned(),
            q_neg: ArrayView2::from_shape((n_neg, dim), qn).map_err(shape_err)?.to_owned(),
        };
        *out = ctc_loss(&batch, tau, eps)?;
        Ok(())
    })
}

/// Mean IoU over `classes + 1` labels (background included) for flat label
/// arrays; 255 in `gts` is ignored.
///
/// # Safety
/// `preds` and `gts` hold `n_pixels` bytes; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn toco_miou(
    preds: *const u8,
    gts: *const u8,
    n_pixels: usize,
    classes: usize,
    out: *mut f64,
) -> TocoStatus {
    guard(|| {
        let p = unsafe { slice(preds, n_pixels, "preds") }?;
        let g = unsafe { slice(gts, n_pixels, "gts") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let pa = Array2::from_shape_vec((1, n_pixels), p.to_vec()).map_err(shape_err)?;
        let ga = Array2::from_shape_vec((1, n_pixels), g.to_vec()).map_err(shape_err)?;
        *out = toco_core::metrics::miou(&[pa], &[ga], classes)?.miou;
        Ok(())
    })
}

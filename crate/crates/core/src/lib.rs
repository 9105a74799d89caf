//! Token contrast for weakly-supervised semantic segmentation with a small
//! vision transformer, trained from image-level labels only.
//!
//! The crate is organised bottom-up: [`backbone`] (ViT with per-block
//! traces and hand-written backward passes), [`cam`] (activation maps and
//! pseudo labels), [`ptc`] and [`ctc`] (the two contrast losses),
//! [`segmenter`] (decoder, refinement and training), [`data`] and
//! [`metrics`] (synthetic shapes and mIoU), and [`diagnostics`].

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod float;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod ptc;
pub mod segmenter;

pub use error::{Error, Result};
pub use float::Float;

/// Configures the global worker pool from `TOCO_THREADS`, if set. Safe to call
/// more than once; later calls are ignored.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var("TOCO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

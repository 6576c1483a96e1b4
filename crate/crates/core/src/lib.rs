//! Dual-view correlation hybrid attention network for paired-view image
//! classification, built on a small reverse-mode autodiff engine.
//!
//! The crate covers the whole pipeline: synthetic dual-view phantoms,
//! preprocessing, the truncated residual backbone, local and non-local
//! attention blocks, the row-wise dual-view correlation loss, Adam
//! training, evaluation metrics and Grad-CAM saliency.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod preprocess;
pub mod saliency;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamStore, Session};
pub use tape::{Tape, Var, Window};
pub use tensor::Tensor;

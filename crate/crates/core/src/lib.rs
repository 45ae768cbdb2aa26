//! Engagement estimation for dyadic conversations.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`rng`]: dense tensors and a reverse-mode tape.
//! * [`layers`]: linear projections, stacked BiLSTM with separated direction
//!   outputs, scaled dot-product attention and the MLP head.
//! * [`model`]: domain prompts, the stacked interaction layers and the CCC loss.
//! * [`data`]: tensor files, manifests, window segmentation and synthetic corpora.
//! * [`train`]: Adam, warmup + cosine schedule, EMA and the epoch loop.
//! * [`metrics`]: concordance correlation, corpus evaluation and prediction export.
//! * [`gradcheck`]: central finite-difference verification suites.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, UnaryKind, Var};
pub use error::{DapaError, Result};
pub use model::{DapaModel, ModelConfig};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::TrainConfig;

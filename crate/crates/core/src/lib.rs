//! Age estimation over long-tailed label distributions.
//!
//! The pipeline is: a small convolutional backbone produces a `C×H×W` feature
//! map, [`rearrange`] folds groups of `r²` channels into `r×r` spatial patches,
//! a categorizing convolution turns that into a per-pixel score map with one
//! channel per age, and [`pixel_aux`] supervises both every pixel (training
//! only) and a flattened holistic projection. Training runs in two stages
//! ([`trainer`]): instance-balanced end-to-end training, then a class-balanced
//! head retrained over the frozen backbone. At inference [`routing`] picks,
//! per image, the head whose prediction is most stable under a horizontal flip.
//!
//! [`metrics`] implements MAE, class-wise MAE, ε-error and AAR together with
//! head/tail group protocols, and [`synth`] renders a deterministic long-tailed
//! benchmark to exercise everything end to end.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pixel_aux;
pub mod plot;
pub mod rearrange;
pub mod routing;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{AgeLabel, LabelDistribution, PredictionDistribution};
pub use tensor::{Real, Tensor3};

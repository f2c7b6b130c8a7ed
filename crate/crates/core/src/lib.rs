//! Distillation loss kernels with analytic gradients, a COCO-style
//! detection evaluator and paired seed-sweep statistics.
//!
//! Tensors are `(batch, channel, height, width)` row-major `f32` arrays;
//! reductions accumulate in `f64`.

pub mod bench;
pub mod conv;
pub mod cwd;
pub mod demo;
pub mod deteval;
mod error;
pub mod flat;
pub mod gradcheck;
pub mod mask;
pub mod mgd;
pub mod rng;
pub mod stats;
pub mod sweep;
pub mod tenfile;
pub mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvLayer};
pub use cwd::{cwd_backward, cwd_grad_student, cwd_loss, cwd_total, logit_kd_loss, CwdConfig};
pub use error::{Error, Result};
pub use mask::{sample_batch_mask, sample_mask};
pub use mgd::{mgd_backward, mgd_loss, mgd_total, mgd_train_step, MgdConfig, MgdGradients, Projector};
pub use rng::Rng;
pub use tensor::{spatial_softmax, Tensor4};

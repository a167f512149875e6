//! Two-stage crop-and-couple cardiac segmentation.
//!
//! Stage 1 is a UNet whose conv blocks are followed by efficient additive
//! attention; its background prediction drives a connected-component crop of
//! the heart region. Stage 2 runs three weight-shared specialist networks
//! (LV, RV, MYO) coupled by cross-attention on the crop and pastes the refined
//! masks back into the full frame.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, Gradients, Mode, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, ParamId, ParamStore, StepSchedule};
pub use tensor::{DType, Scalar, Tensor};

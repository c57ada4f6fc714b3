//! Anatomy-guided attention toolkit: report-phrase grounding, Gaussian prior
//! channels from signed distance transforms, affine ROI transfer, a
//! two-channel 3D CNN + multi-view mLSTM classifier, and the training
//! pipeline around them.

pub mod autodiff;
pub mod error;
pub mod grounding;
pub mod net;
pub mod objective;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod roialign;
pub mod verify;
pub mod volgrid;

pub use error::{Error, Result, Warning};

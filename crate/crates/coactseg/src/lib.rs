//! CoactSeg-style longitudinal lesion segmentation at desk scale.
//!
//! A multi-head 3D encoder-decoder is trained jointly on heterogeneous data:
//! single-time-point samples with all-lesion labels and two-time-point
//! samples with new-lesion labels, tied together by a longitudinal relation
//! regularizer. The crate bundles everything needed to run the pipeline end
//! to end: a reverse-mode autodiff tensor engine, physical-space volumes,
//! a deterministic phantom generator, weighted patch sampling, the network,
//! losses, the Adam training loop, sliding-window inference, and the
//! evaluation metrics.

pub mod config;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

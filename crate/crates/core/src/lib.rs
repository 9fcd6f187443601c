//! Construction kit for re-parameterizable anchor-free object detectors.
//!
//! The crate builds detectors from declarative layer tables: an EfficientRep
//! backbone of re-parameterizable blocks, a Rep-PAN neck, and a decoupled
//! head, together with the machinery needed to train, evaluate, fuse, and
//! quantize them at desk scale — a deterministic NCHW tensor engine with
//! reverse-mode gradients, detection losses, label assigners, an INT8
//! quantization simulator, and a synthetic-shapes training harness.

pub mod assigner;
pub mod error;
pub mod losses;
pub mod netdef;
pub mod quantsim;
pub mod reparam;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Conditional score-based synthesis of missing image modalities.
//!
//! A single score network is trained by denoising score matching over every
//! split of the modality set into synthesized and conditional channels, and
//! missing channels are generated by integrating the conditional reverse SDE
//! with the conditional channels held fixed.

pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod modality;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod sde;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

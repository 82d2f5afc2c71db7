//! Selective state-space audio-visual segmentation.
//!
//! Bottom-up: [`tensor`] and [`rng`] provide storage and randomness,
//! [`autodiff`] a tape with hand-written backward rules, [`ssm`] the scan
//! kernels, [`layout`] the token orderings, [`blocks`] and [`model`] the
//! network, [`data`] the synthetic clips and [`harness`] the experiment drivers.

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod harness;
pub mod layout;
pub mod model;
pub mod nn;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

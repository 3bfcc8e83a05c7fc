//! Cascaded dual-scale LinkNet for binary image segmentation.
//!
//! The crate covers the whole experiment pipeline: PNG dataset ingestion and
//! synthetic fixtures ([`data`]), a LinkNet-style encoder-decoder with
//! multi-scale input injection and hand-written backpropagation ([`nn`]),
//! the BCE − Dice objective and overlap metrics ([`loss`], [`metrics`]),
//! SGD-with-momentum training and checkpoints ([`train`]), the two-stage
//! cascade ([`cascade`]) and the k-fold experiment runner ([`experiment`]).

pub mod cascade;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod resize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor4};

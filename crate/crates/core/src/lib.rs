//! Weakly supervised smoke segmentation toolkit.
//!
//! A convolutional teacher guides a transformer student through a
//! cross-architecture feature-consistency loss; class activation maps from the
//! student are thresholded into pseudo-masks, refined by a configurable
//! post-processing recipe and scored against pixel ground truth.

pub mod backbone;
pub mod bench;
pub mod cam;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod io;
pub mod kt;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod synth;
pub mod trainer;

pub use candle_core::Device;
pub use error::{Error, Result};

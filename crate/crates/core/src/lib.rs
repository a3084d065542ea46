//! Hypotheses-CNN-Pooling multi-label image classification.
//!
//! Objectness proposals are grouped by normalized cut over their IoU graph,
//! the best few per group are cropped and pushed through one shared CNN, and
//! the per-hypothesis class scores are fused by a componentwise max.

pub mod bbox;
pub mod error;
pub mod eval;
pub mod harness;
pub mod hcp;
pub mod hselect;
pub mod image;
pub mod labels;
pub mod nn;
pub mod objectness;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use labels::LabelVector;
pub use tensor::{Scalar, Tensor};

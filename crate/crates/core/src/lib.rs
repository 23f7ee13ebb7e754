//! Template-to-point-cloud registration with neural deformation fields.
//!
//! A field is trained on a synthetic articulated template to predict, for any
//! query point, ordered offsets toward every template vertex. At inference
//! the field is first fine-tuned on the target itself with neural ICP, then
//! followed to convergence, fitted with the parametric template, and refined
//! against the target geometry.

// Index loops mirror the math on small fixed-size arrays, and `!(x > 0.0)`
// deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod error;
pub mod field;
pub mod fitting;
pub mod geometry;
pub mod nicp;
pub mod nn;
pub mod segmentation;
pub mod template;

pub use error::{Error, Result};

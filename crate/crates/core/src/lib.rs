//! Weighted-average ensembling of binary classifiers, with the surrounding
//! tooling: evaluation metrics, image preprocessing and augmentation, a
//! trainable classification head for frozen-backbone features, and seeded
//! fixture generators.
//!
//! All labels are binary with [`model::Label::Pneumonia`] as the positive class.

pub mod ensemble;
pub mod error;
pub mod head;
pub mod imageprep;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
pub use model::Label;

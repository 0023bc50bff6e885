//! Cloth-changing person re-identification.
//!
//! The pipeline has four stages:
//!
//! * [`semantic_encoder`] turns an image and its human-parsing map into a
//!   foreground image and a clothes-shielded rendering.
//! * [`decoder`] extracts the original, enhanced and shielding features with a
//!   pluggable extractor, channel attention driven by the foreground image, and
//!   a weight-shared shielded stream.
//! * [`losses`] and [`training`] optimize identity cross-entropy, circle loss
//!   and the shielding alignment loss.
//! * [`evaluation`] ranks galleries and reports CMC / mAP plus diagnostics.
//!
//! [`data`] reads dataset directories and generates the synthetic
//! "paper-doll" dataset used by the tests.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod losses;
pub mod semantic_encoder;
pub mod tensor;
pub mod training;

pub use error::{Result, SavsError};
pub use exec::Exec;

//! Detection heads for singing-voice deepfake detection over pooled
//! foundation-model embeddings.
//!
//! The crate covers a small reverse-mode autodiff engine, linear CKA as a
//! differentiable alignment loss, the FCN / CNN / concatenation-fusion /
//! FIONA heads, Adam training with early stopping, EER scoring, and the FEMB
//! embedding container.

pub mod autodiff;
pub mod cka;
pub mod dataio;
pub mod error;
pub mod label;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use label::Label;

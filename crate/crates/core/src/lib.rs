//! Cross-layer tensor-ring adapters for parameter-efficient fine-tuning of a
//! frozen toy dual encoder.
//!
//! The crate is layered bottom-up: dense [`tensor`] algebra, a reverse-mode
//! [`autodiff`] tape, the [`ring`] adapter, the dual-encoder [`model`], and
//! [`train`]ing plus [`analysis`] on top.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod optim;
pub mod ring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

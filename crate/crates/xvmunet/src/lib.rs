//! A self-contained medical-image segmentation toolkit built on a
//! hand-rolled reverse-mode autodiff engine: selective state-space scans,
//! gated LSTM sequence cells, an encoder–decoder network that fuses the two
//! feature streams, a full training loop, and a synthetic lesion dataset
//! generator. Everything computes in `f64` on the CPU with deterministic,
//! seed-driven behavior end to end.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod network;
pub mod pnm;
pub mod ssm;
pub mod training;
pub mod tensor;
pub mod vss;
pub mod xlstm;

pub use autodiff::{Gradients, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;

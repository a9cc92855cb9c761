//! Dense tensors with reverse-mode autodiff, the neural blocks built on them
//! (3D residual convolutions, multi-head self-attention, LSTM), four clip
//! classification architectures, a functional-connectivity baseline pipeline,
//! synthetic 4D dataset generation, training/transfer loops, and attribution
//! analyses (temporal attention maps, 3D Grad-CAM).
//!
//! Everything runs on the CPU. Kernels are deterministic for a fixed seed:
//! parallel sections only ever write disjoint outputs, so results do not
//! depend on the worker count.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod connectome;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Mode, Tape, TensorId};

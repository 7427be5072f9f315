//! Asynchronous perception machine.
//!
//! An image is summarised once into a trigger column by a strided
//! convolution. Each location query concatenates that column with a
//! positional encoding and is fired, independently of every other, through
//! a shared MLP to give a location feature. Features can be averaged into
//! an image-level embedding (test-time training against a teacher token) or
//! decoded into pixels.
//!
//! Computation is in `f64`; files store `f32`. Every reduction runs in a
//! fixed order, so results are bitwise reproducible for a given seed
//! regardless of worker count.

pub mod encoder;
mod engine;
pub mod error;
pub mod grad;
pub mod net;
pub mod profiler;
pub mod teacher_io;
pub mod tensor;
pub mod trainer;
pub mod ttt;

pub use error::{Error, Result};
pub use net::{ApmParams, ArchSpec, ModelSpec};
pub use tensor::Tensor;

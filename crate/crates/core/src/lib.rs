//! Memory-efficient three-frame optical flow.
//!
//! The engine predicts bidirectional flow (`t→t−1`, `t→t+1`) for the centre frame
//! of every triplet by iterative recurrent refinement over two all-pairs
//! correlation volumes held at 1/16 of the input resolution. Alongside the
//! network it provides the video runtime with feature/volume reuse, the
//! mixture-of-Laplace training loss, evaluation metrics, flow file I/O and an
//! analytic memory model for the correlation volumes.

pub mod autodiff;
pub mod corrvol;
pub mod error;
pub mod flowio;
pub mod learn;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod selfcheck;
pub mod tensors;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

//! Training-free, first-frame conditioned video diffusion with zero-shot
//! trajectory control, running on a deterministic toy 3D U-Net.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff tape, RTD1 dumps.
//! - [`backbone`]: seeded toy U-Net with spatial/temporal attention and
//!   addressable feature taps.
//! - [`scheduler`]: DDIM schedule, deterministic sampling and inversion.
//! - [`injection`]: patch-wise AdaIN debiasing, query substitution and
//!   first-frame key/value propagation.
//! - [`traj`]: PCA-reduced query alignment under semantic masks.
//! - [`pipeline`]: image IO, toy codec, end-to-end runs and reports.

pub mod backbone;
pub mod error;
pub mod injection;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod traj;

pub use error::{Error, Result};
pub use tensor::{Float, Gradients, SparseMap, Tape, Tensor, Var};

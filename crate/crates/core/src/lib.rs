//! Reconstructive compression of video token streams.
//!
//! The crate turns long videos (as token grids from a frozen patch encoder)
//! into compact token sequences and back:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors with reverse-mode autodiff.
//! - [`encoder`] — deterministic frozen patch encoder producing token grids.
//! - [`dts`] — spatio-temporal compressor: attention blocks plus a strided
//!   3D-conv temporal merger, with a half-size reconstruction decoder.
//! - [`sgm`] — semantic-guided masking: learned token scores that steer
//!   which tokens get masked during reconstruction training.
//! - [`trainer`] — the self-supervised training loop, Adam, LR schedule,
//!   and binary checkpoints.
//! - [`selector`] — query-aware top-k token selection under a budget.
//! - [`data`] — dataset pruning over embedding clips and frame-sampling
//!   plans.
//! - [`eval`] — synthetic needle-in-a-haystack, masking ablation, linear
//!   probe, and selector-rate sweeps.
//! - [`cli`] — the `recot` command-line entry points.

pub mod encoder;
pub mod error;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

//! Task-adaptive channel attention for episodic few-shot classification.
//!
//! The crate is layered bottom-up:
//!
//! * [`numeric`]: f64 tensors, a reverse-mode tape and the conv/pool kernels.
//! * [`data`]: class-disjoint splits, N-way K-shot episodes, a synthetic
//!   fine-grained image generator and a PPM folder loader.
//! * [`backbone`]: the four-block convolutional feature extractor with
//!   optional instance attention after selected blocks.
//! * [`scores`]: prototypes, mean spatial maps and the channel-wise
//!   intra/inter representativeness scores.
//! * [`attention`]: the fully-connected weight blocks and the support, query
//!   and instance attention modules plus task-weight composition.
//! * [`head`]: metric head, probabilities, loss and accuracy.
//! * [`model`]: the full episode forward pass wiring the above together.
//! * [`harness`]: training, evaluation, ablations, sweeps and diagnostics.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod parallel;
pub mod params;
pub mod scores;

pub use error::{Error, Result};

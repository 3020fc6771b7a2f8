//! Synthetic-speech quality (MOS) prediction guided by a simulated auditory
//! periphery.
//!
//! The pipeline has three branches that meet in a cross-attention fusion
//! network:
//!
//! - [`cochlea`] + [`encoder`]: ERB-spaced gammatone filtering, half-wave
//!   rectification and cube-root compression produce a cochleagram, which is
//!   pooled to 40 Hz and summarised into a 192-d auditory embedding.
//! - [`rvq`]: residual vector quantization of an embedding sequence; the
//!   first-stage residual is the semantic-distortion signal.
//! - [`fusion`] + [`decoder`]: the projected auditory rows and the distortion
//!   rows query a second embedding sequence under a diagonal band mask, and
//!   the fused rows are decoded to a MOS in (1, 5).
//!
//! [`numerics`] provides the reverse-mode autodiff tape all learnable parts
//! are built on, and [`training`] orchestrates the stage-wise training.

mod error;

pub mod audio;
pub mod cochlea;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod rvq;
pub mod training;

pub(crate) mod binio;

pub use error::{Error, Result};

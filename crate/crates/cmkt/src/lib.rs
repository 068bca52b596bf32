//! Cross-modality knowledge transfer for CTC speech recognition.
//!
//! A self-contained library and CLI: a conformer-style acoustic encoder, a
//! text branch with entropy-regularized optimal-transport alignment between
//! the two modalities, hierarchical adapter feedback, CTC training with a
//! composite loss, and greedy decoding — all on a small reverse-mode
//! autodiff core in plain Rust.

pub mod cli;
pub mod config;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod io;
pub mod model;
pub mod ot;
pub mod params;
pub mod tape;
pub mod trainer;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor2D;

/// Reserved token ids shared by both modalities.
pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
/// First id available for real symbols.
pub const FIRST_CONTENT_ID: usize = 4;

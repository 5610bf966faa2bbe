//! Video fill-in-the-blank with merging LSTMs.
//!
//! The sentence around a blank is split into a left and a right fragment,
//! each encoded by its own LSTM; the two final states are merged into a
//! sentence vector `u`. Max-pooled CNN region features of the video are
//! attended with `u`, and the attention-weighted visual vector is added to
//! `u` before a softmax over answer words.
//!
//! Modules, bottom up:
//!
//! * [`tensor`]: dense tensors, a recorded graph with reverse-mode
//!   gradients, and a finite-difference checker.
//! * [`text`]: tokenization, embeddings, fragment LSTMs and the merge layer.
//! * [`attention`]: region projection, attention map and weighted pooling.
//! * [`model`]: parameters and the forward pass for the three model modes.
//! * [`train`]: Adagrad, early stopping, the training regimes, evaluation.
//! * [`io`]: on-disk formats.
//! * [`diagnostics`]: whole-model gradient check.
//! * [`synth`]: seeded synthetic corpora.
//! * [`cli`]: the `vfb` command line.

pub mod attention;
pub mod cli;
pub mod diagnostics;
pub mod error;
mod init;
pub mod io;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};

//! Audio-to-intent classification from frame-level subword CTC posteriors.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`nn`] | tensors, layers with manual backprop, Adam, gradient checking |
//! | [`tokenizer`] | BPE subword vocabulary |
//! | [`cbow`] | continuous bag-of-words subword embeddings |
//! | [`posteriors`] | posterior matrices, synthesis, file formats, datasets |
//! | [`acoustic`] | sum-of-posteriors vector and acoustic projection |
//! | [`textual`] | Top-N occurrences, positional encodings, SA encoder |
//! | [`classifier`] | fused model, training, batch scoring |
//! | [`eval`] | EER, FAR at fixed TPR, ablations, analysis reports |

pub mod acoustic;
pub mod cbow;
pub mod classifier;
mod container;
mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod posteriors;
pub mod scenarios;
pub mod textual;
pub mod tokenizer;

pub use error::{Error, Result};
pub use par::Execution;

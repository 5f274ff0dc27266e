//! Out-of-context image–caption detection toolkit.
//!
//! The crate covers the whole pipeline around a detector that decides whether
//! a caption belongs with an image:
//!
//! - [`manifest`]: labeled image–caption manifests, split statistics and the
//!   `(image, caption, Yes/No)` fine-tuning record format.
//! - [`prompt`]: combining a verification question with a caption.
//! - [`model`]: frozen toy encoders, the trainable projection + classifier
//!   head, checkpoints.
//! - [`trainer`]: weighted cross-entropy, gradient descent on the trainable
//!   partition only, finite-difference audits and freeze verification.
//! - [`chat`]: a retrying client for remote chat-style vision-language
//!   endpoints with a resumable transcript.
//! - [`extract`]: turning free-text answers into YES / NO / UNKNOWN verdicts.
//! - [`eval`]: accuracy, pristine, falsified, AUC and comparison tables.
//! - [`cli`]: the `oocdet` command surface.

pub mod chat;
pub mod cli;
pub mod eval;
pub mod extract;
pub mod images;
pub mod manifest;
pub mod model;
pub mod prompt;
pub mod trainer;

pub use manifest::{Label, Partition, Sample, SplitManifest};

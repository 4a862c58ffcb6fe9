//! Desk-scale study of unanswerable visual questions.
//!
//! The crate builds a complete, deterministic pipeline around one idea:
//! multiply an image embedding elementwise with the embeddings of each
//! contextualized answer option, project that correlation signal into a tiny
//! frozen decoder's feature space, and train only the projection (optionally
//! plus signal-conditioned low-rank adapters) so the decoder answers when it
//! can and says "I cannot answer." when it cannot.
//!
//! Modules, bottom-up:
//! - [`numerics`]: dense matrices, gradient tape, AdamW, gradient checker
//! - [`embedder`]: deterministic synthetic image/text embedder plus a loader
//!   for externally computed embeddings
//! - [`parser`]: rule-based prompt classification into multiple-choice,
//!   open-ended, and non-question
//! - [`correlation`]: elementwise image-text correlation vectors
//! - [`projection`]: learned injection layer and inference-time signal
//!   strength control
//! - [`injlora`]: low-rank adapters whose inner mixing matrix is computed
//!   from the correlation signal
//! - [`microvlm`]: the frozen micro vision-language decoder
//! - [`dataio`]: synthetic corpus generation, the three answerable-to-
//!   unanswerable transforms, and line-delimited JSON formats
//! - [`training`]: pretraining, projection-only and adapter recipes, with a
//!   supervised-contrastive warm-up epoch
//! - [`eval`]: answer extraction, circular and dual accuracy, abstention
//!   rates, and report emission
//! - [`cli`]: the `upd` command-line entry points

pub mod checkpoint;
pub mod correlation;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod injlora;
pub mod microvlm;
pub mod numerics;
pub mod parser;
pub mod projection;
pub mod training;

pub use error::{Result, UpdError};

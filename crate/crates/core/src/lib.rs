//! Multi-modal generalized category discovery.
//!
//! Given a dataset where only some classes carry labels, the pipeline
//! discovers the unlabeled classes while classifying the labeled ones,
//! using both a visual embedding and a synthesized text embedding per
//! instance:
//!
//! 1. **Stage 1** trains a text embedding synthesizer: a linear map from
//!    frozen visual embeddings to pseudo tokens fed through a frozen text
//!    encoder, optimized with a symmetric alignment loss plus a
//!    distillation loss toward real class-name embeddings.
//! 2. **Stage 2** jointly trains a visual branch and a text branch that
//!    share one prototype classifier, with contrastive representation
//!    losses, self-distillation, a multi-modal mean-entropy regularizer
//!    and a cross-modal instance-consistency objective.
//!
//! Evaluation reports Hungarian-matched clustering accuracy over all /
//! old / new classes under a single global matching, and includes
//! semi-supervised k-means baselines and class-number estimation.

pub mod autodiff;
pub mod cache;
pub mod config;
pub mod data;
pub mod dual;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tes;

pub use error::{Error, Result};

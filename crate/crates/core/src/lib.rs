//! Topic-aware knowledge-grounded dialogue: model, training, and evaluation.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which the model components are built:
//!
//! - [`corpus`] — dialogues, factoids, topics, tokenizer, synthetic data
//! - [`encoder`] — semantic and topic embeddings for utterances/factoids
//! - [`attention`] — the three topic-aware attention mechanisms and the
//!   aggregated pair-representation matrix
//! - [`selector`] — grounding-span prediction and factoid ranking
//! - [`generator`] — span fusion and autoregressive response decoding
//! - [`model`] — parameter store and the assembled end-to-end network
//! - [`training`] — joint loss, Adam, and the training loop
//! - [`metrics`] — EM / token-F1 / MRR / Recall / BLEU / ROUGE and
//!   knowledge-change analysis

pub mod attention;
pub mod checks;
pub mod corpus;
pub mod encoder;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selector;
pub mod tensor;
pub mod training;

pub use tensor::{grad_check, grad_check_with, FdMethod, GradCheckReport, NodeId, Tape, Tensor, TensorError};

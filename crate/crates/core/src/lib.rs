//! Desk-scale recommendation-policy training pipeline.
//!
//! The crate turns structured interaction logs into natural-language prompts,
//! trains a tiny autoregressive policy on them (supervised stage first, then
//! group-relative policy optimization with chain-of-thought rollouts and a
//! composite position-weighted-LCS reward), and evaluates checkpoints with
//! Recall@K / NDCG@K. Everything is deterministic given a master seed, and a
//! synthetic environment with known latent preferences makes the end-to-end
//! claims checkable on a laptop.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod promptgen;
pub mod reward;
pub mod rng;
pub mod sft;
pub mod simenv;
pub mod templates;
pub mod tokenizer;

pub use error::{Error, Result};

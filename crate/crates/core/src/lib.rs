//! Chain-of-thought subspace meta-learning for few-shot captioning, built on
//! a synthetic subject-verb-object world.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`graph`], [`optim`], [`gradcheck`]: dense f64 arrays with
//!   tape-based reverse-mode autodiff and the two optimizers.
//! - [`rng`]: one root seed, named deterministic sub-streams.
//! - [`world`]: the synthetic grammar, scenes, captions, and category splits.
//! - [`models`]: the frozen backbones — a deterministic vision encoder and a
//!   tiny decoder-only language model.
//! - [`adaptor`]: per-step meta-adaptors producing chained visual prompts,
//!   the 3-term chain-of-thought loss, and 3-step generation.
//! - [`meta`]: the bilevel subspace engine — inner-loop coefficient
//!   adaptation, outer-loop meta-updates, episodic sampling, meta-test,
//!   a non-episodic baseline, and ablation toggles.
//! - [`metrics`]: BLEU, ROUGE-L, CIDEr, retrieval recall, content coverage.
//! - [`config`]: the experiment configuration with paper-default values.

pub mod adaptor;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};

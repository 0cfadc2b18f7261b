//! The frozen backbones: word-level tokenizer, deterministic vision encoder,
//! and a tiny decoder-only language model pretrained on the synthetic corpus.

pub mod lm;
pub mod tokenizer;
pub mod vision;

pub use lm::{greedy_decode, lm_pretrain, LmConfig, PretrainReport, TinyLM};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, SEP};
pub use vision::VisionEncoder;

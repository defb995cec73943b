//! Entropy-aware text diffusion engine.
//!
//! A self-contained seq2seq diffusion stack: its own autodiff, tokenizers
//! and token statistics, noise schedules (including a per-position schedule
//! shaped by token self-information), a transformer denoiser, training with
//! self-conditioning and partial noising, a reverse sampler with decode-order
//! tracing, and the evaluation metrics to score all of it.

pub mod denoiser;
pub mod diffusion;
pub mod evalmetrics;
pub mod numcore;
pub mod sampler;
pub mod schedules;
pub mod textcorpus;
pub mod training;

//! Pure-compute core for local attribute editing on small images.
//!
//! Everything in this crate is deterministic and allocation-only: no files,
//! no threads, no clocks. The companion `attredit` crate layers IO, file
//! formats and the CLI on top.
//!
//! The main pieces:
//!
//! - [`diffusion`]: noise schedule, forward diffusion, deterministic DDIM
//!   stepping, classifier-free guidance and blended-latent composition.
//! - [`conditioning`]: toy trainable text/vision encoders producing the
//!   condition tokens consumed by the denoiser.
//! - [`adapter`]: the score-gated dual cross-attention block that injects
//!   image tokens next to text tokens while suppressing them inside the
//!   edit mask according to a learned per-pixel text-importance score.
//! - [`denoiser`]: a small U-shaped noise predictor with per-level adapter
//!   blocks and a reference encoder branch wired in through zero-initialized
//!   projections.
//! - [`freq_guidance`]: sampling-time correction steering the low-frequency
//!   Fourier content of the predicted clean latent toward the original
//!   image on weakly-attended mask pixels, plus the cumulative amplitude
//!   difference diagnostic.
//! - [`mask`]: binary-mask morphology and coarse-mask synthesis.
//! - [`synth`]: the procedural face generator with ground-truth
//!   segmentation and template captions.
//! - [`pipeline`]: the training step and the full guided editing loop.
//! - [`probe`]: a small attribute classifier used to score edit fidelity.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod freq_guidance;
pub mod graph;
pub mod mask;
pub mod math;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;

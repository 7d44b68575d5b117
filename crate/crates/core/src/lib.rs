//! Diffusion sampling under low-precision arithmetic.
//!
//! The crate is organized around the angular form of a discrete noise
//! schedule (`cos φ_t = √ᾱ_t`, `sin φ_t = √(1−ᾱ_t)`) and the family of
//! prediction targets `u = r·cos ψ_t·x + r·sin ψ_t·ε` that a denoiser can be
//! trained to output. On top of that sit:
//!
//! - [`precision`]: models of floating-point relative error (bit-exact
//!   bfloat16 rounding and synthetic `(1+δ)` injection) together with the
//!   closed-form error predictions they should follow;
//! - [`sampler`]: the generalized DDIM step for any parameterization, a DDPM
//!   ancestral step, classifier-free guidance in v- or ε-space, and full
//!   trajectory sampling;
//! - [`head`]: a hand-rolled AdaLN residual MLP denoiser with exact
//!   reverse-mode gradients, its training loop, and EMA;
//! - [`argen`]: masked random-order autoregressive generation over small
//!   continuous-token grids, with a set-attention conditioner standing in
//!   for a language-model backbone;
//! - [`toyspace`]: synthetic token distributions with known ground truth and
//!   two-sample divergence metrics;
//! - [`experiments`]: the reproducible studies exposed by the `vdiff` CLI.

pub mod argen;
pub mod error;
pub mod experiments;
pub mod head;
mod nn;
pub mod param;
pub mod precision;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod toyspace;

pub use error::{Error, Result};

//! Relative-error models for low-precision arithmetic.
//!
//! Storing a value in a low-precision float corrupts it multiplicatively:
//! `x → x·(1+δ)` with `|δ|` bounded by the format's spacing. Four modes are
//! provided:
//!
//! - `exact`: no corruption;
//! - `bf16-round`: bit-exact round-to-nearest-even bfloat16 rounding, the
//!   realism mode;
//! - `fixed-delta`: `δ = ±delta_max` with random sign per component, the
//!   theory-matching mode (`delta_max` defaults to 1/128, the bfloat16
//!   spacing bound);
//! - `uniform-delta`: `δ ~ U(−delta_max, delta_max)` per component.
//!
//! `fixed-delta` makes the closed-form error predictions below exactly
//! testable; true bfloat16 rounding follows the same 1/ᾱ scaling at a
//! smaller constant because the mean rounding error sits below the spacing
//! bound.
//!
//! The closed forms are always evaluated in f64 regardless of the simulated
//! model precision.

use half::bf16;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::schedule::Schedule;

/// bfloat16 spacing bound 1/128: the default relative-error magnitude.
pub const BF16_DELTA: f64 = 1.0 / 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionMode {
    Exact,
    Bf16Round,
    FixedDelta,
    UniformDelta,
}

/// How relative error is injected into model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionModel {
    pub mode: PrecisionMode,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_delta_max() -> f64 {
    BF16_DELTA
}

impl PrecisionModel {
    pub fn exact() -> Self {
        PrecisionModel {
            mode: PrecisionMode::Exact,
            delta_max: BF16_DELTA,
            seed: 0,
        }
    }

    pub fn bf16() -> Self {
        PrecisionModel {
            mode: PrecisionMode::Bf16Round,
            delta_max: BF16_DELTA,
            seed: 0,
        }
    }

    pub fn fixed_delta(delta_max: f64, seed: u64) -> Result<Self> {
        let pm = PrecisionModel {
            mode: PrecisionMode::FixedDelta,
            delta_max,
            seed,
        };
        pm.validate()?;
        Ok(pm)
    }

    pub fn uniform_delta(delta_max: f64, seed: u64) -> Result<Self> {
        let pm = PrecisionModel {
            mode: PrecisionMode::UniformDelta,
            delta_max,
            seed,
        };
        pm.validate()?;
        Ok(pm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_max > 0.0 && self.delta_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta_max must lie in (0, 1), got {}",
                self.delta_max
            )));
        }
        Ok(())
    }

    /// The injection stream for one worker, split from the model's seed.
    pub fn stream(&self, worker: u64) -> ChaCha12Rng {
        rng::stream(self.seed, Domain::Inject, worker)
    }

    /// Multiplicative factors `(1+δ)` for the stochastic modes; `None` for
    /// exact and bf16-round, which consume no randomness.
    pub(crate) fn draw_factors(&self, rng: &mut ChaCha12Rng, len: usize) -> Option<Vec<f64>> {
        match self.mode {
            PrecisionMode::Exact | PrecisionMode::Bf16Round => None,
            PrecisionMode::FixedDelta => Some(
                (0..len)
                    .map(|_| {
                        if rng.random::<bool>() {
                            1.0 + self.delta_max
                        } else {
                            1.0 - self.delta_max
                        }
                    })
                    .collect(),
            ),
            PrecisionMode::UniformDelta => Some(
                (0..len)
                    .map(|_| 1.0 + rng.random_range(-self.delta_max..self.delta_max))
                    .collect(),
            ),
        }
    }

    /// Apply the error model to a vector. δ is drawn i.i.d. per component
    /// and per call from the given stream.
    pub fn inject(&self, rng: &mut ChaCha12Rng, u: &[f64]) -> Vec<f64> {
        match self.mode {
            PrecisionMode::Exact => u.to_vec(),
            PrecisionMode::Bf16Round => u.iter().map(|&v| round_bf16(v)).collect(),
            _ => {
                let factors = self.draw_factors(rng, u.len()).unwrap();
                u.iter().zip(&factors).map(|(v, f)| v * f).collect()
            }
        }
    }
}

/// Round to the nearest bfloat16 (8 exponent bits, 7 explicit mantissa
/// bits, round-to-nearest-even) and return at working precision. ±∞ and
/// NaN pass through unchanged; rounding is a projection, so it is
/// idempotent.
pub fn round_bf16(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    bf16::from_f64(x).to_f64()
}

pub fn round_bf16_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = round_bf16(*x);
    }
}

/// Standard deviation of the DDIM numerical error term for an ε-prediction
/// model stepping `t_from → t_to`, assuming a standard-normal model output:
///
/// ```text
/// |√(1−ᾱ_to) − (√ᾱ_to/√ᾱ_from)·√(1−ᾱ_from)| · δ
/// ```
///
/// Near ᾱ → 1 this vanishes; as ᾱ_from approaches the schedule floor it
/// blows up like 1/√ᾱ_from.
pub fn eps_pred_step_error_std(
    s: &Schedule,
    t_from: usize,
    t_to: usize,
    delta: f64,
) -> Result<f64> {
    if t_to > t_from {
        return Err(Error::BadStepList);
    }
    let coef =
        s.sin_phase(t_to)? - s.cos_phase(t_to)? / s.cos_phase(t_from)? * s.sin_phase(t_from)?;
    Ok(coef.abs() * delta)
}

/// The per-unit-step loss overhead an ε-prediction model pays in v-space
/// under relative error δ: `E[(e^(t))²] = δ²/ᾱ_t`.
pub fn theoretical_vloss_overhead(s: &Schedule, t: usize, delta: f64) -> Result<f64> {
    Ok(delta * delta / s.alpha_bar(t)?)
}

/// The equivalent v-space numerical error of an ε-prediction model output:
/// `e^(t) = ε_θ·δ/cos φ_t`.
pub fn equiv_vpred_error(s: &Schedule, t: usize, eps_theta: &[f64], delta: f64) -> Result<Vec<f64>> {
    let c = s.cos_phase(t)?;
    Ok(eps_theta.iter().map(|e| e * delta / c).collect())
}

//! Prediction-target parameterizations.
//!
//! A denoiser can be trained to predict any linear combination
//! `u^(t) = r_t·cos ψ_t·x + r_t·sin ψ_t·ε`. The named kinds are ε-prediction
//! (ψ = π/2), x-prediction (ψ = 0) and v-prediction (ψ = φ_t + π/2). Custom
//! kinds fix the offset ψ_t − φ_t, which is what the error-sweep scans.
//!
//! Recovery of `(x, ε)` from `(x^(t), u^(t))` divides by `sin(ψ_t − φ_t)`,
//! so a parameterization is only usable at steps where that stays away
//! from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Recovery is rejected when `|sin(ψ_t − φ_t)|` falls below this floor;
/// above it double-precision recovery keeps ~10 significant digits.
pub const WELL_POSED_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Parameterization {
    /// ψ = π/2, r = 1: the model predicts the noise ε.
    EpsPred,
    /// ψ = 0, r = 1: the model predicts the clean data x.
    XPred,
    /// ψ = φ_t + π/2, r = 1: the model predicts v = cos φ_t·ε − sin φ_t·x.
    VPred,
    /// ψ = φ_t + psi_offset with a constant scale r.
    Custom {
        psi_offset: f64,
        #[serde(default = "default_r")]
        r: f64,
    },
}

fn default_r() -> f64 {
    1.0
}

/// Angular coefficients of a parameterization at one step.
///
/// `gap = sin(ψ − φ)` is carried separately because for the named kinds it
/// has an exact closed form (1 for v-pred, cos φ for ε-pred, −sin φ for
/// x-pred) that avoids cancellation in the recovery denominator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Coeffs {
    pub cos_psi: f64,
    pub sin_psi: f64,
    pub gap: f64,
    pub r: f64,
}

impl Parameterization {
    /// ψ_t in radians given the phase φ_t.
    pub fn psi(&self, phi: f64) -> f64 {
        match self {
            Parameterization::EpsPred => std::f64::consts::FRAC_PI_2,
            Parameterization::XPred => 0.0,
            Parameterization::VPred => phi + std::f64::consts::FRAC_PI_2,
            Parameterization::Custom { psi_offset, .. } => phi + psi_offset,
        }
    }

    /// Constant output scale r_t.
    pub fn r(&self) -> f64 {
        match self {
            Parameterization::Custom { r, .. } => *r,
            _ => 1.0,
        }
    }

    /// Short stable name used in CSV output.
    pub fn tag(&self) -> &'static str {
        match self {
            Parameterization::EpsPred => "eps-pred",
            Parameterization::XPred => "x-pred",
            Parameterization::VPred => "v-pred",
            Parameterization::Custom { .. } => "custom",
        }
    }

    pub(crate) fn coeffs(&self, cos_phi: f64, sin_phi: f64) -> Coeffs {
        match self {
            Parameterization::EpsPred => Coeffs {
                cos_psi: 0.0,
                sin_psi: 1.0,
                gap: cos_phi,
                r: 1.0,
            },
            Parameterization::XPred => Coeffs {
                cos_psi: 1.0,
                sin_psi: 0.0,
                gap: -sin_phi,
                r: 1.0,
            },
            Parameterization::VPred => Coeffs {
                cos_psi: -sin_phi,
                sin_psi: cos_phi,
                gap: 1.0,
                r: 1.0,
            },
            Parameterization::Custom { psi_offset, r } => {
                let (so, co) = psi_offset.sin_cos();
                Coeffs {
                    cos_psi: cos_phi * co - sin_phi * so,
                    sin_psi: sin_phi * co + cos_phi * so,
                    gap: so,
                    r: *r,
                }
            }
        }
    }

    pub(crate) fn coeffs_at(&self, s: &Schedule, t: usize) -> Result<Coeffs> {
        Ok(self.coeffs(s.cos_phase(t)?, s.sin_phase(t)?))
    }

    /// `(r, sin(ψ_t − φ_t))` at one step, for error-measurement code.
    pub fn scale_and_gap(&self, s: &Schedule, t: usize) -> Result<(f64, f64)> {
        let c = self.coeffs_at(s, t)?;
        Ok((c.r, c.gap))
    }

    /// |sin(ψ_t − φ_t)| must clear `WELL_POSED_FLOOR` and r must be
    /// positive; checked by every operation that touches the step.
    pub fn check_well_posed(&self, s: &Schedule, t: usize) -> Result<()> {
        let c = self.coeffs_at(s, t)?;
        if !(c.r > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "parameterization scale r must be positive, got {}",
                c.r
            )));
        }
        if c.gap.abs() < WELL_POSED_FLOOR {
            return Err(Error::IllPosed {
                t,
                gap: c.gap.abs(),
                floor: WELL_POSED_FLOOR,
            });
        }
        Ok(())
    }
}

/// A model prediction (or training target) at one step, tagged with the
/// parameterization that defines what its values mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub values: Vec<f64>,
    pub step: usize,
    pub kind: Parameterization,
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { left: a, right: b });
    }
    Ok(())
}

/// The training target `u^(t) = r·cos ψ_t·x + r·sin ψ_t·ε`.
///
/// For v-pred this is `cos φ_t·ε − sin φ_t·x`. Well-posedness is enforced
/// for t ≥ 1; t = 0 is allowed so the clean endpoint (v = ε) is reachable.
pub fn target(
    p: &Parameterization,
    s: &Schedule,
    t: usize,
    x: &[f64],
    eps: &[f64],
) -> Result<TargetVector> {
    check_dims(x.len(), eps.len())?;
    let c = p.coeffs_at(s, t)?;
    if t >= 1 {
        p.check_well_posed(s, t)?;
    }
    let values = x
        .iter()
        .zip(eps)
        .map(|(xi, ei)| c.r * (c.cos_psi * xi + c.sin_psi * ei))
        .collect();
    Ok(TargetVector {
        values,
        step: t,
        kind: *p,
    })
}

/// Invert `(x^(t), u^(t))` back to estimates of the clean data and noise:
///
/// ```text
/// x̂ = (sin ψ·x^(t) − sin φ·u/r) / sin(ψ−φ)
/// ε̂ = −(cos ψ·x^(t) − cos φ·u/r) / sin(ψ−φ)
/// ```
pub fn recover_x_eps(
    p: &Parameterization,
    s: &Schedule,
    t: usize,
    x_t: &[f64],
    u: &TargetVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(x_t.len(), u.values.len())?;
    if u.step != t {
        return Err(Error::StepMismatch {
            got: u.step,
            expected: t,
        });
    }
    p.check_well_posed(s, t)?;
    let (cp, sp) = (s.cos_phase(t)?, s.sin_phase(t)?);
    let c = p.coeffs(cp, sp);
    let mut x_hat = Vec::with_capacity(x_t.len());
    let mut eps_hat = Vec::with_capacity(x_t.len());
    for (xt, uv) in x_t.iter().zip(&u.values) {
        let un = uv / c.r;
        x_hat.push((c.sin_psi * xt - sp * un) / c.gap);
        eps_hat.push(-(c.cos_psi * xt - cp * un) / c.gap);
    }
    Ok((x_hat, eps_hat))
}

/// Re-express a prediction in another parameterization by recovering
/// `(x̂, ε̂)` and forming the new target. `convert` with the prediction's own
/// kind is the identity.
pub fn convert(
    p_to: &Parameterization,
    s: &Schedule,
    t: usize,
    x_t: &[f64],
    u: &TargetVector,
) -> Result<TargetVector> {
    if *p_to == u.kind {
        return Ok(u.clone());
    }
    let (x_hat, eps_hat) = recover_x_eps(&u.kind, s, t, x_t, u)?;
    // Forming the destination target needs no division; `target` enforces
    // the well-posedness floor for t >= 1.
    target(p_to, s, t, &x_hat, &eps_hat)
}

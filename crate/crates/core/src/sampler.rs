//! DDIM and DDPM sampling with relative-error injection.
//!
//! The DDIM step is implemented in its angular form, valid for any
//! prediction-target parameterization:
//!
//! ```text
//! x̃^(to) = [sin(φ_to − φ_from)·(1+δ)·u/r − sin(φ_to − ψ)·x^(from)] / sin(ψ − φ_from)
//! ```
//!
//! With exact precision this is the ideal DDIM update; the `(1+δ)` factor is
//! whatever the configured [`PrecisionModel`] injects. The DDPM step recovers
//! `(x̂, ε̂)` from the (injected) prediction and samples the standard
//! ᾱ-parameterized Gaussian posterior.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{convert, Parameterization, TargetVector};
use crate::precision::{round_bf16, PrecisionMode, PrecisionModel};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSpace {
    VSpace,
    EpsSpace,
}

/// Classifier-free guidance: `out = uncond + ω·(cond − uncond)`, combined in
/// the configured space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub space: GuidanceSpace,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() {
            return Err(Error::InvalidConfig("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

/// Which reverse-process update `sample_trajectory` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SamplerKind {
    Ddim,
    /// Ancestral sampling. With `high_precision_cast` the injected model
    /// output is used at working precision for the posterior computation;
    /// without it (and under bf16 rounding) every intermediate of the
    /// posterior arithmetic is rounded as well.
    Ddpm { high_precision_cast: bool },
}

/// A recorded reverse trajectory: `states[i]` is the state at step
/// `step_list[i]`, with the list strictly decreasing and ending at 0.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub step_list: Vec<usize>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    /// CSV rows `(traj_id, t, component_index, value)`.
    pub fn write_csv(&self, traj_id: usize, out: &mut String) {
        for (t, state) in self.step_list.iter().zip(&self.states) {
            for (c, v) in state.iter().enumerate() {
                out.push_str(&format!("{traj_id},{t},{c},{v}\n"));
            }
        }
    }
}

/// A denoiser: anything that maps `(t, x^(t))` to a prediction. The
/// conditioning signal, if any, is captured by the implementation.
pub trait Denoiser {
    fn predict(&mut self, t: usize, x_t: &[f64]) -> Result<TargetVector>;
}

impl<F> Denoiser for F
where
    F: FnMut(usize, &[f64]) -> Result<TargetVector>,
{
    fn predict(&mut self, t: usize, x_t: &[f64]) -> Result<TargetVector> {
        self(t, x_t)
    }
}

/// Generalized DDIM update `t_from → t_to` for a prediction of any kind.
///
/// Injection happens first; with an exact model this is the ideal step. A
/// zero-length step returns the state unchanged.
pub fn ddim_step(
    s: &Schedule,
    t_from: usize,
    t_to: usize,
    x_t: &[f64],
    u: &TargetVector,
    pm: &PrecisionModel,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if t_to > t_from {
        return Err(Error::BadStepList);
    }
    if u.step != t_from {
        return Err(Error::StepMismatch {
            got: u.step,
            expected: t_from,
        });
    }
    if x_t.len() != u.values.len() {
        return Err(Error::DimensionMismatch {
            left: x_t.len(),
            right: u.values.len(),
        });
    }
    u.kind.check_well_posed(s, t_from)?;
    if t_to == t_from {
        return Ok(x_t.to_vec());
    }
    let (cp_from, sp_from) = (s.cos_phase(t_from)?, s.sin_phase(t_from)?);
    let (cp_to, sp_to) = (s.cos_phase(t_to)?, s.sin_phase(t_to)?);
    let c = u.kind.coeffs(cp_from, sp_from);
    // sin(phi_to - phi_from) and sin(phi_to - psi) from the tables.
    let sin_dphi = sp_to * cp_from - cp_to * sp_from;
    let sin_to_minus_psi = sp_to * c.cos_psi - cp_to * c.sin_psi;
    let a = sin_dphi / c.gap;
    let b = -sin_to_minus_psi / c.gap;
    let injected = pm.inject(rng, &u.values);
    Ok(injected
        .iter()
        .zip(x_t)
        .map(|(ui, xi)| a * (ui / c.r) + b * xi)
        .collect())
}

/// DDPM ancestral update `t_from → t_to`.
///
/// The injected prediction is inverted to `(x̂, ε̂)` and the standard
/// posterior `q(x^(to) | x^(from), x̂)` is sampled with the provided noise.
/// The final step to t = 0 has zero posterior variance, so no noise is
/// added there.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step(
    s: &Schedule,
    t_from: usize,
    t_to: usize,
    x_t: &[f64],
    pred: &TargetVector,
    noise: &[f64],
    pm: &PrecisionModel,
    rng: &mut ChaCha12Rng,
    high_precision_cast: bool,
) -> Result<Vec<f64>> {
    if t_from == 0 || t_to >= t_from {
        return Err(Error::BadStepList);
    }
    if x_t.len() != pred.values.len() || x_t.len() != noise.len() {
        return Err(Error::DimensionMismatch {
            left: x_t.len(),
            right: pred.values.len().min(noise.len()),
        });
    }
    if pred.step != t_from {
        return Err(Error::StepMismatch {
            got: pred.step,
            expected: t_from,
        });
    }
    pred.kind.check_well_posed(s, t_from)?;

    // Without the float32 cast, bf16 rounding contaminates every
    // intermediate of the recovery and posterior arithmetic, not just the
    // model output.
    let lowp = !high_precision_cast && pm.mode == PrecisionMode::Bf16Round;
    let q = |v: f64| if lowp { round_bf16(v) } else { v };

    let (cp, sp) = (s.cos_phase(t_from)?, s.sin_phase(t_from)?);
    let c = pred.kind.coeffs(cp, sp);
    let a_from = s.alpha_bar(t_from)?;
    let a_to = s.alpha_bar(t_to)?;
    let ratio = a_from / a_to;
    let denom = 1.0 - a_from;
    let coef_x0 = a_to.sqrt() * (1.0 - ratio) / denom;
    let coef_xt = ratio.sqrt() * (1.0 - a_to) / denom;
    let var = (1.0 - a_to) * (1.0 - ratio) / denom;
    let sigma = if t_to == 0 { 0.0 } else { var.max(0.0).sqrt() };

    let injected = pm.inject(rng, &pred.values);
    let mut out = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let un = q(injected[i] / c.r);
        let x_hat = q((q(c.sin_psi * x_t[i]) - q(sp * un)) / c.gap);
        let mean = q(q(coef_x0 * x_hat) + q(coef_xt * x_t[i]));
        out.push(if t_to == 0 { mean } else { q(mean + q(sigma * noise[i])) });
    }
    Ok(out)
}

/// `out = out_uncond + ω·(out_cond − out_uncond)`, computed as the
/// equivalent `(1−ω)·uncond + ω·cond` so the ω ∈ {0, 1} endpoints are exact.
pub fn cfg_combine(
    g: &GuidanceConfig,
    out_cond: &TargetVector,
    out_uncond: &TargetVector,
) -> Result<TargetVector> {
    g.validate()?;
    if out_cond.kind != out_uncond.kind {
        return Err(Error::KindMismatch);
    }
    if out_cond.step != out_uncond.step {
        return Err(Error::StepMismatch {
            got: out_uncond.step,
            expected: out_cond.step,
        });
    }
    if out_cond.values.len() != out_uncond.values.len() {
        return Err(Error::DimensionMismatch {
            left: out_cond.values.len(),
            right: out_uncond.values.len(),
        });
    }
    let w = g.omega;
    let values = out_cond
        .values
        .iter()
        .zip(&out_uncond.values)
        .map(|(cv, uv)| (1.0 - w) * uv + w * cv)
        .collect();
    Ok(TargetVector {
        values,
        step: out_cond.step,
        kind: out_cond.kind,
    })
}

/// Wraps a conditional and an unconditional denoiser into one guided
/// denoiser. Both outputs are converted into the guidance space, combined,
/// and converted back to the underlying model's kind, so v-space and
/// ε-space guidance can be compared on identical trajectories.
pub struct CfgDenoiser<'a, C, U> {
    pub cond: C,
    pub uncond: U,
    pub guidance: GuidanceConfig,
    pub schedule: &'a Schedule,
}

impl<C: Denoiser, U: Denoiser> Denoiser for CfgDenoiser<'_, C, U> {
    fn predict(&mut self, t: usize, x_t: &[f64]) -> Result<TargetVector> {
        let out_c = self.cond.predict(t, x_t)?;
        let out_u = self.uncond.predict(t, x_t)?;
        let model_kind = out_c.kind;
        let space_kind = match self.guidance.space {
            GuidanceSpace::VSpace => Parameterization::VPred,
            GuidanceSpace::EpsSpace => Parameterization::EpsPred,
        };
        let c_s = convert(&space_kind, self.schedule, t, x_t, &out_c)?;
        let u_s = convert(&space_kind, self.schedule, t, x_t, &out_u)?;
        let combined = cfg_combine(&self.guidance, &c_s, &u_s)?;
        convert(&model_kind, self.schedule, t, x_t, &combined)
    }
}

/// Uniform-in-t step list from `t_max` down to 0 with `n_steps` intervals.
pub fn step_list_uniform_t(t_max: usize, n_steps: usize) -> Vec<usize> {
    assert!(n_steps >= 1);
    let mut list: Vec<usize> = (0..=n_steps)
        .map(|k| ((t_max * (n_steps - k)) as f64 / n_steps as f64).round() as usize)
        .collect();
    list.dedup();
    list
}

/// Step list approximately uniform in φ, which equalizes the per-step error
/// of a v-prediction model.
pub fn step_list_uniform_phi(s: &Schedule, n_steps: usize) -> Vec<usize> {
    assert!(n_steps >= 1);
    let t_max = s.t_max();
    let phi_top = s.phase(t_max).expect("t_max is in range");
    let mut list = vec![t_max];
    for k in 1..n_steps {
        let tgt = phi_top * (n_steps - k) as f64 / n_steps as f64;
        // phi is strictly increasing; find the nearest step by bisection.
        let (mut lo, mut hi) = (0usize, t_max);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if s.phase(mid).unwrap() < tgt {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = if (s.phase(hi).unwrap() - tgt).abs() < (tgt - s.phase(lo).unwrap()).abs() {
            hi
        } else {
            lo
        };
        if t > 0 && t < *list.last().unwrap() {
            list.push(t);
        }
    }
    list.push(0);
    list
}

fn check_step_list(s: &Schedule, step_list: &[usize]) -> Result<()> {
    let ok = step_list.first() == Some(&s.t_max())
        && step_list.last() == Some(&0)
        && step_list.windows(2).all(|w| w[1] < w[0]);
    if !ok {
        return Err(Error::BadStepList);
    }
    Ok(())
}

/// Run the reverse process along `step_list`, recording every state.
///
/// Deterministic given the model and the rng stream: injection draws and
/// DDPM noise both come from `rng` in a fixed order.
pub fn sample_trajectory<D: Denoiser + ?Sized>(
    model: &mut D,
    s: &Schedule,
    kind: SamplerKind,
    pm: &PrecisionModel,
    step_list: &[usize],
    init_noise: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<Trajectory> {
    check_step_list(s, step_list)?;
    let dim = init_noise.len();
    let mut states = Vec::with_capacity(step_list.len());
    states.push(init_noise.to_vec());
    let mut x = init_noise.to_vec();
    for w in step_list.windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        let u = model.predict(t_from, &x)?;
        if u.values.len() != dim {
            return Err(Error::DimensionMismatch {
                left: u.values.len(),
                right: dim,
            });
        }
        x = match kind {
            SamplerKind::Ddim => ddim_step(s, t_from, t_to, &x, &u, pm, rng)?,
            SamplerKind::Ddpm {
                high_precision_cast,
            } => {
                let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                ddpm_step(s, t_from, t_to, &x, &u, &noise, pm, rng, high_precision_cast)?
            }
        };
        states.push(x.clone());
    }
    Ok(Trajectory {
        step_list: step_list.to_vec(),
        states,
    })
}

/// A denoiser that knows the true clean token: it infers ε̂ from `x^(t)` and
/// emits the exact target. Driving DDIM with it reproduces the forward
/// states, so a full trajectory must land back on `x`.
pub struct OracleDenoiser<'a> {
    pub x_true: Vec<f64>,
    pub kind: Parameterization,
    pub schedule: &'a Schedule,
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict(&mut self, t: usize, x_t: &[f64]) -> Result<TargetVector> {
        let (cp, sp) = (self.schedule.cos_phase(t)?, self.schedule.sin_phase(t)?);
        if sp == 0.0 {
            return Err(Error::IllPosed {
                t,
                gap: 0.0,
                floor: f64::MIN_POSITIVE,
            });
        }
        let eps_hat: Vec<f64> = x_t
            .iter()
            .zip(&self.x_true)
            .map(|(xt, x)| (xt - cp * x) / sp)
            .collect();
        crate::param::target(&self.kind, self.schedule, t, &self.x_true, &eps_hat)
    }
}

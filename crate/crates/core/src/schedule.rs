//! Discrete noise schedules in cumulative (ᾱ) and angular (φ) form.
//!
//! A schedule is a precomputed table over steps `0..=T` with `ᾱ_0 = 1`
//! (clean data) and `ᾱ_T` close to 0 (pure noise). The angular form places
//! the noised state on the unit circle of the x–ε plane:
//! `x^(t) = cos φ_t · x + sin φ_t · ε` with `cos φ_t = √ᾱ_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedules never reach ᾱ = 0 exactly; the last entry is floored here so
/// that 1/ᾱ and 1/cos φ diagnostics stay finite. The blow-up regime is
/// probed by letting ᾱ approach this floor.
pub const ALPHA_BAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// ᾱ_t decays linearly from 1 to the floor.
    LinearAlphaBar,
    /// ᾱ_t = cos²((t/T)·π/2), floored at `ALPHA_BAR_FLOOR`; gives uniform
    /// spacing in φ.
    Cosine,
}

/// Precomputed noise schedule. Immutable after construction and safe to
/// share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ScheduleData", into = "ScheduleData")]
pub struct Schedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    cos_phi: Vec<f64>,
    sin_phi: Vec<f64>,
    phi: Vec<f64>,
}

/// JSON form: `{kind, T, alpha_bar}` with full-precision decimal floats.
#[derive(Serialize, Deserialize)]
struct ScheduleData {
    kind: ScheduleKind,
    #[serde(rename = "T")]
    t_max: usize,
    alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleData> for Schedule {
    type Error = Error;

    fn try_from(data: ScheduleData) -> Result<Schedule> {
        if data.alpha_bar.len() != data.t_max + 1 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar has {} entries, expected T+1 = {}",
                data.alpha_bar.len(),
                data.t_max + 1
            )));
        }
        Schedule::from_alpha_bar(data.kind, data.alpha_bar)
    }
}

impl From<Schedule> for ScheduleData {
    fn from(s: Schedule) -> ScheduleData {
        ScheduleData {
            kind: s.kind,
            t_max: s.t_max(),
            alpha_bar: s.alpha_bar,
        }
    }
}

impl Schedule {
    /// Build a schedule of the given kind over `t_max` steps.
    pub fn make(kind: ScheduleKind, t_max: usize) -> Result<Schedule> {
        if t_max == 0 {
            return Err(Error::EmptySchedule);
        }
        let table: Vec<f64> = (0..=t_max)
            .map(|t| {
                let frac = t as f64 / t_max as f64;
                let raw = match kind {
                    ScheduleKind::LinearAlphaBar => 1.0 - frac * (1.0 - ALPHA_BAR_FLOOR),
                    ScheduleKind::Cosine => {
                        let c = (frac * std::f64::consts::FRAC_PI_2).cos();
                        c * c
                    }
                };
                raw.max(ALPHA_BAR_FLOOR)
            })
            .collect();
        Schedule::from_alpha_bar(kind, table)
    }

    /// Build from an explicit ᾱ table (`alpha_bar[0] = 1`, strictly
    /// decreasing, positive). This is also the deserialization path.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Schedule> {
        if alpha_bar.len() < 2 {
            return Err(Error::EmptySchedule);
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] > 0.0 && pair[1] < pair[0]) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar must be strictly decreasing and positive; \
                     violated between t={t} and t={}",
                    t + 1
                )));
            }
        }
        let cos_phi: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sin_phi: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let phi: Vec<f64> = cos_phi.iter().map(|c| c.acos()).collect();
        Ok(Schedule {
            kind,
            alpha_bar,
            cos_phi,
            sin_phi,
            phi,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T; valid step indices are `0..=T`.
    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// φ_t = arccos(√ᾱ_t) ∈ [0, π/2].
    pub fn phase(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.phi[t])
    }

    /// cos φ_t = √ᾱ_t.
    pub fn cos_phase(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.cos_phi[t])
    }

    /// sin φ_t = √(1−ᾱ_t).
    pub fn sin_phase(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sin_phi[t])
    }

    /// Forward diffusion: `cos φ_t · x + sin φ_t · ε` elementwise.
    pub fn forward_diffuse(&self, t: usize, x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if x.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: eps.len(),
            });
        }
        let (c, s) = (self.cos_phi[t], self.sin_phi[t]);
        Ok(x.iter().zip(eps).map(|(xi, ei)| c * xi + s * ei).collect())
    }
}

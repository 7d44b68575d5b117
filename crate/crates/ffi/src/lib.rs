//! C ABI over the numeric core: schedules, prediction-target
//! parameterizations, bfloat16 rounding, the closed-form error predictions,
//! and the generalized DDIM step.
//!
//! Conventions:
//! - Handles are opaque pointers created by `*_new` functions and released
//!   by the matching `*_free`; passing null anywhere returns
//!   `VDIFF_STATUS_NULL_POINTER`.
//! - Every fallible call returns a `VdiffStatus`; results come back through
//!   out-pointers. Buffers are caller-allocated `double` arrays of length
//!   `dim`.
//! - The DDIM step here is the exact update; callers model low-precision
//!   storage by scaling the prediction buffer by `(1 + delta)` before the
//!   call.

use std::os::raw::c_char;

use vdiff::param::{convert, recover_x_eps, target, Parameterization, TargetVector};
use vdiff::precision::{eps_pred_step_error_std, round_bf16, theoretical_vloss_overhead};
use vdiff::sampler::ddim_step;
use vdiff::schedule::{Schedule, ScheduleKind};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum VdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IllPosed = 3,
    OutOfRange = 4,
}

/// Noise schedule families.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum VdiffScheduleKind {
    LinearAlphaBar = 0,
    Cosine = 1,
}

/// Opaque noise schedule handle.
pub struct VdiffSchedule(Schedule);

/// Opaque parameterization handle.
pub struct VdiffParam(Parameterization);

fn status_of(err: &vdiff::Error) -> VdiffStatus {
    match err {
        vdiff::Error::IllPosed { .. } => VdiffStatus::IllPosed,
        vdiff::Error::StepOutOfRange { .. } => VdiffStatus::OutOfRange,
        _ => VdiffStatus::InvalidArgument,
    }
}

unsafe fn slice_in<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn slice_out<'a>(ptr: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(ptr, len))
    }
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn vdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a schedule with `t_max` steps.
///
/// # Safety
/// `out` must be a valid pointer to a schedule-handle slot.
#[no_mangle]
pub unsafe extern "C" fn vdiff_schedule_new(
    kind: VdiffScheduleKind,
    t_max: u32,
    out: *mut *mut VdiffSchedule,
) -> VdiffStatus {
    if out.is_null() {
        return VdiffStatus::NullPointer;
    }
    let kind = match kind {
        VdiffScheduleKind::LinearAlphaBar => ScheduleKind::LinearAlphaBar,
        VdiffScheduleKind::Cosine => ScheduleKind::Cosine,
    };
    match Schedule::make(kind, t_max as usize) {
        Ok(s) => {
            *out = Box::into_raw(Box::new(VdiffSchedule(s)));
            VdiffStatus::Ok
        }
        Err(e) => {
            *out = std::ptr::null_mut();
            status_of(&e)
        }
    }
}

/// # Safety
/// `handle` must come from `vdiff_schedule_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vdiff_schedule_free(handle: *mut VdiffSchedule) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdiff_schedule_t_max(
    schedule: *const VdiffSchedule,
    out: *mut u32,
) -> VdiffStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        return VdiffStatus::NullPointer;
    };
    *out = s.0.t_max() as u32;
    VdiffStatus::Ok
}

/// ᾱ_t.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdiff_schedule_alpha_bar(
    schedule: *const VdiffSchedule,
    t: u32,
    out: *mut f64,
) -> VdiffStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        return VdiffStatus::NullPointer;
    };
    match s.0.alpha_bar(t as usize) {
        Ok(v) => {
            *out = v;
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// φ_t = arccos(√ᾱ_t), in radians.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdiff_schedule_phase(
    schedule: *const VdiffSchedule,
    t: u32,
    out: *mut f64,
) -> VdiffStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        return VdiffStatus::NullPointer;
    };
    match s.0.phase(t as usize) {
        Ok(v) => {
            *out = v;
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Forward diffusion: `out = cos φ_t · x + sin φ_t · eps`, elementwise over
/// `dim` components.
///
/// # Safety
/// All buffers must hold at least `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_forward_diffuse(
    schedule: *const VdiffSchedule,
    t: u32,
    x: *const f64,
    eps: *const f64,
    out: *mut f64,
    dim: usize,
) -> VdiffStatus {
    let (Some(s), Some(x), Some(eps), Some(out)) = (
        schedule.as_ref(),
        slice_in(x, dim),
        slice_in(eps, dim),
        slice_out(out, dim),
    ) else {
        return VdiffStatus::NullPointer;
    };
    match s.0.forward_diffuse(t as usize, x, eps) {
        Ok(v) => {
            out.copy_from_slice(&v);
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// ε-prediction parameterization (ψ = π/2, r = 1).
#[no_mangle]
pub extern "C" fn vdiff_param_eps_pred() -> *mut VdiffParam {
    Box::into_raw(Box::new(VdiffParam(Parameterization::EpsPred)))
}

/// x-prediction parameterization (ψ = 0, r = 1).
#[no_mangle]
pub extern "C" fn vdiff_param_x_pred() -> *mut VdiffParam {
    Box::into_raw(Box::new(VdiffParam(Parameterization::XPred)))
}

/// v-prediction parameterization (ψ = φ_t + π/2, r = 1).
#[no_mangle]
pub extern "C" fn vdiff_param_v_pred() -> *mut VdiffParam {
    Box::into_raw(Box::new(VdiffParam(Parameterization::VPred)))
}

/// Custom parameterization ψ_t = φ_t + psi_offset with scale r > 0.
///
/// # Safety
/// `out` must be a valid pointer to a parameterization-handle slot.
#[no_mangle]
pub unsafe extern "C" fn vdiff_param_custom(
    psi_offset: f64,
    r: f64,
    out: *mut *mut VdiffParam,
) -> VdiffStatus {
    if out.is_null() {
        return VdiffStatus::NullPointer;
    }
    if !(r > 0.0) || !psi_offset.is_finite() {
        *out = std::ptr::null_mut();
        return VdiffStatus::InvalidArgument;
    }
    *out = Box::into_raw(Box::new(VdiffParam(Parameterization::Custom {
        psi_offset,
        r,
    })));
    VdiffStatus::Ok
}

/// # Safety
/// `handle` must come from a `vdiff_param_*` constructor and not be freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn vdiff_param_free(handle: *mut VdiffParam) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// The training target `u = r·cos ψ_t·x + r·sin ψ_t·eps`.
///
/// # Safety
/// All buffers must hold at least `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_target(
    param: *const VdiffParam,
    schedule: *const VdiffSchedule,
    t: u32,
    x: *const f64,
    eps: *const f64,
    out: *mut f64,
    dim: usize,
) -> VdiffStatus {
    let (Some(p), Some(s), Some(x), Some(eps), Some(out)) = (
        param.as_ref(),
        schedule.as_ref(),
        slice_in(x, dim),
        slice_in(eps, dim),
        slice_out(out, dim),
    ) else {
        return VdiffStatus::NullPointer;
    };
    match target(&p.0, &s.0, t as usize, x, eps) {
        Ok(u) => {
            out.copy_from_slice(&u.values);
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Invert `(x_t, u)` to estimates of the clean data and the noise.
///
/// # Safety
/// All buffers must hold at least `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_recover_x_eps(
    param: *const VdiffParam,
    schedule: *const VdiffSchedule,
    t: u32,
    x_t: *const f64,
    u: *const f64,
    out_x: *mut f64,
    out_eps: *mut f64,
    dim: usize,
) -> VdiffStatus {
    let (Some(p), Some(s), Some(x_t), Some(u), Some(out_x), Some(out_eps)) = (
        param.as_ref(),
        schedule.as_ref(),
        slice_in(x_t, dim),
        slice_in(u, dim),
        slice_out(out_x, dim),
        slice_out(out_eps, dim),
    ) else {
        return VdiffStatus::NullPointer;
    };
    let tv = TargetVector {
        values: u.to_vec(),
        step: t as usize,
        kind: p.0,
    };
    match recover_x_eps(&p.0, &s.0, t as usize, x_t, &tv) {
        Ok((x_hat, eps_hat)) => {
            out_x.copy_from_slice(&x_hat);
            out_eps.copy_from_slice(&eps_hat);
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Re-express a prediction made under `from` in the `to` parameterization.
///
/// # Safety
/// All buffers must hold at least `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_convert(
    from: *const VdiffParam,
    to: *const VdiffParam,
    schedule: *const VdiffSchedule,
    t: u32,
    x_t: *const f64,
    u: *const f64,
    out: *mut f64,
    dim: usize,
) -> VdiffStatus {
    let (Some(pf), Some(pt), Some(s), Some(x_t), Some(u), Some(out)) = (
        from.as_ref(),
        to.as_ref(),
        schedule.as_ref(),
        slice_in(x_t, dim),
        slice_in(u, dim),
        slice_out(out, dim),
    ) else {
        return VdiffStatus::NullPointer;
    };
    let tv = TargetVector {
        values: u.to_vec(),
        step: t as usize,
        kind: pf.0,
    };
    match convert(&pt.0, &s.0, t as usize, x_t, &tv) {
        Ok(v) => {
            out.copy_from_slice(&v.values);
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// One exact DDIM update `t_from → t_to` for a prediction `u` of the given
/// parameterization.
///
/// # Safety
/// All buffers must hold at least `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_ddim_step(
    param: *const VdiffParam,
    schedule: *const VdiffSchedule,
    t_from: u32,
    t_to: u32,
    x_t: *const f64,
    u: *const f64,
    out: *mut f64,
    dim: usize,
) -> VdiffStatus {
    let (Some(p), Some(s), Some(x_t), Some(u), Some(out)) = (
        param.as_ref(),
        schedule.as_ref(),
        slice_in(x_t, dim),
        slice_in(u, dim),
        slice_out(out, dim),
    ) else {
        return VdiffStatus::NullPointer;
    };
    let tv = TargetVector {
        values: u.to_vec(),
        step: t_from as usize,
        kind: p.0,
    };
    let pm = vdiff::precision::PrecisionModel::exact();
    let mut rng = pm.stream(0);
    match ddim_step(&s.0, t_from as usize, t_to as usize, x_t, &tv, &pm, &mut rng) {
        Ok(v) => {
            out.copy_from_slice(&v);
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Round each value to the nearest bfloat16 in place.
///
/// # Safety
/// `values` must hold at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdiff_round_bf16(values: *mut f64, len: usize) -> VdiffStatus {
    let Some(values) = slice_out(values, len) else {
        return VdiffStatus::NullPointer;
    };
    for v in values.iter_mut() {
        *v = round_bf16(*v);
    }
    VdiffStatus::Ok
}

/// Std of the ε-prediction DDIM numerical error term for `t_from → t_to`
/// under relative error `delta`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdiff_eps_pred_step_error_std(
    schedule: *const VdiffSchedule,
    t_from: u32,
    t_to: u32,
    delta: f64,
    out: *mut f64,
) -> VdiffStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        return VdiffStatus::NullPointer;
    };
    match eps_pred_step_error_std(&s.0, t_from as usize, t_to as usize, delta) {
        Ok(v) => {
            *out = v;
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// The v-space loss overhead `δ²/ᾱ_t` an ε-prediction model pays at step t.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdiff_vloss_overhead(
    schedule: *const VdiffSchedule,
    t: u32,
    delta: f64,
    out: *mut f64,
) -> VdiffStatus {
    let (Some(s), false) = (schedule.as_ref(), out.is_null()) else {
        return VdiffStatus::NullPointer;
    };
    match theoretical_vloss_overhead(&s.0, t as usize, delta) {
        Ok(v) => {
            *out = v;
            VdiffStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

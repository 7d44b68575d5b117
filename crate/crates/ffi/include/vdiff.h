#ifndef VDIFF_H
#define VDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  VDIFF_STATUS_OK = 0,
  VDIFF_STATUS_NULL_POINTER = 1,
  VDIFF_STATUS_INVALID_ARGUMENT = 2,
  VDIFF_STATUS_ILL_POSED = 3,
  VDIFF_STATUS_OUT_OF_RANGE = 4,
} VdiffStatus;

/**
 * Noise schedule families.
 */
typedef enum {
  VDIFF_SCHEDULE_KIND_LINEAR_ALPHA_BAR = 0,
  VDIFF_SCHEDULE_KIND_COSINE = 1,
} VdiffScheduleKind;

/**
 * Opaque parameterization handle.
 */
typedef struct VdiffParam VdiffParam;

/**
 * Opaque noise schedule handle.
 */
typedef struct VdiffSchedule VdiffSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static C string.
 */
const char *vdiff_version(void);

/**
 * Create a schedule with `t_max` steps.
 *
 * # Safety
 * `out` must be a valid pointer to a schedule-handle slot.
 */
VdiffStatus vdiff_schedule_new(VdiffScheduleKind kind, uint32_t t_max, VdiffSchedule **out);

/**
 * # Safety
 * `handle` must come from `vdiff_schedule_new` and not be freed twice.
 */
void vdiff_schedule_free(VdiffSchedule *handle);

/**
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
VdiffStatus vdiff_schedule_t_max(const VdiffSchedule *schedule, uint32_t *out);

/**
 * ᾱ_t.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
VdiffStatus vdiff_schedule_alpha_bar(const VdiffSchedule *schedule, uint32_t t, double *out);

/**
 * φ_t = arccos(√ᾱ_t), in radians.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
VdiffStatus vdiff_schedule_phase(const VdiffSchedule *schedule, uint32_t t, double *out);

/**
 * Forward diffusion: `out = cos φ_t · x + sin φ_t · eps`, elementwise over
 * `dim` components.
 *
 * # Safety
 * All buffers must hold at least `dim` doubles.
 */
VdiffStatus vdiff_forward_diffuse(const VdiffSchedule *schedule,
                                  uint32_t t,
                                  const double *x,
                                  const double *eps,
                                  double *out,
                                  uintptr_t dim);

/**
 * ε-prediction parameterization (ψ = π/2, r = 1).
 */
VdiffParam *vdiff_param_eps_pred(void);

/**
 * x-prediction parameterization (ψ = 0, r = 1).
 */
VdiffParam *vdiff_param_x_pred(void);

/**
 * v-prediction parameterization (ψ = φ_t + π/2, r = 1).
 */
VdiffParam *vdiff_param_v_pred(void);

/**
 * Custom parameterization ψ_t = φ_t + psi_offset with scale r > 0.
 *
 * # Safety
 * `out` must be a valid pointer to a parameterization-handle slot.
 */
VdiffStatus vdiff_param_custom(double psi_offset, double r, VdiffParam **out);

/**
 * # Safety
 * `handle` must come from a `vdiff_param_*` constructor and not be freed
 * twice.
 */
void vdiff_param_free(VdiffParam *handle);

/**
 * The training target `u = r·cos ψ_t·x + r·sin ψ_t·eps`.
 *
 * # Safety
 * All buffers must hold at least `dim` doubles.
 */
VdiffStatus vdiff_target(const VdiffParam *param,
                         const VdiffSchedule *schedule,
                         uint32_t t,
                         const double *x,
                         const double *eps,
                         double *out,
                         uintptr_t dim);

/**
 * Invert `(x_t, u)` to estimates of the clean data and the noise.
 *
 * # Safety
 * All buffers must hold at least `dim` doubles.
 */
VdiffStatus vdiff_recover_x_eps(const VdiffParam *param,
                                const VdiffSchedule *schedule,
                                uint32_t t,
                                const double *x_t,
                                const double *u,
                                double *out_x,
                                double *out_eps,
                                uintptr_t dim);

/**
 * Re-express a prediction made under `from` in the `to` parameterization.
 *
 * # Safety
 * All buffers must hold at least `dim` doubles.
 */
VdiffStatus vdiff_convert(const VdiffParam *from,
                          const VdiffParam *to,
                          const VdiffSchedule *schedule,
                          uint32_t t,
                          const double *x_t,
                          const double *u,
                          double *out,
                          uintptr_t dim);

/**
 * One exact DDIM update `t_from → t_to` for a prediction `u` of the given
 * parameterization.
 *
 * # Safety
 * All buffers must hold at least `dim` doubles.
 */
VdiffStatus vdiff_ddim_step(const VdiffParam *param,
                            const VdiffSchedule *schedule,
                            uint32_t t_from,
                            uint32_t t_to,
                            const double *x_t,
                            const double *u,
                            double *out,
                            uintptr_t dim);

/**
 * Round each value to the nearest bfloat16 in place.
 *
 * # Safety
 * `values` must hold at least `len` doubles.
 */
VdiffStatus vdiff_round_bf16(double *values, uintptr_t len);

/**
 * Std of the ε-prediction DDIM numerical error term for `t_from → t_to`
 * under relative error `delta`.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
VdiffStatus vdiff_eps_pred_step_error_std(const VdiffSchedule *schedule,
                                          uint32_t t_from,
                                          uint32_t t_to,
                                          double delta,
                                          double *out);

/**
 * The v-space loss overhead `δ²/ᾱ_t` an ε-prediction model pays at step t.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
VdiffStatus vdiff_vloss_overhead(const VdiffSchedule *schedule,
                                 uint32_t t,
                                 double delta,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VDIFF_H */

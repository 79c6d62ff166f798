/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef KOOPSOS_H
#define KOOPSOS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum KsStatus {
  KS_STATUS_OK = 0,
  KS_STATUS_NULL_POINTER = 1,
  KS_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed JSON or an unparsable field.
   */
  KS_STATUS_PARSE = 3,
  /**
   * Array length disagrees with the object's dimensions.
   */
  KS_STATUS_DIMENSION = 4,
  /**
   * Argument out of range (negative bound constant, α = 0, ...).
   */
  KS_STATUS_INVALID_ARGUMENT = 5,
  /**
   * The solver certified that no controller exists.
   */
  KS_STATUS_INFEASIBLE = 6,
  /**
   * The solver stopped without a usable answer either way.
   */
  KS_STATUS_INCONCLUSIVE = 7,
  /**
   * Evaluation hit a point where the controller is undefined.
   */
  KS_STATUS_NUMERICAL = 8,
  KS_STATUS_PANIC = 9,
  KS_STATUS_INTERNAL = 10,
} KsStatus;

/**
 * Rational state-feedback controller with its Lyapunov certificate.
 */
typedef struct KsController KsController;

/**
 * Lifted bilinear surrogate model.
 */
typedef struct KsSurrogate KsSurrogate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ks_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ks_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void ks_string_free(char *s);

/**
 * Parses a controller from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KsStatus ks_controller_from_json(const char *json, struct KsController **out);

/**
 * Serializes a controller to JSON. Free the result with [`ks_string_free`].
 *
 * # Safety
 * `ctrl` must be a live handle and `out` a valid pointer.
 */
enum KsStatus ks_controller_to_json(const struct KsController *ctrl, char **out);

/**
 * Writes the state dimension `n`, input dimension `m` and lifted
 * dimension `N`. Any output pointer may be null.
 *
 * # Safety
 * `ctrl` must be a live handle; non-null outputs must be valid.
 */
enum KsStatus ks_controller_dims(const struct KsController *ctrl,
                                 size_t *n,
                                 size_t *m,
                                 size_t *big_n);

/**
 * Evaluates the control input `u = μ(x)`.
 *
 * # Safety
 * `x` must hold `n` readable doubles and `u` `m` writable doubles.
 */
enum KsStatus ks_controller_eval(const struct KsController *ctrl,
                                 const double *x,
                                 size_t n,
                                 double *u,
                                 size_t m);

/**
 * Evaluates the Lyapunov function `V(Φ(x))`.
 *
 * # Safety
 * `x` must hold `n` readable doubles and `v` must be writable.
 */
enum KsStatus ks_controller_lyapunov(const struct KsController *ctrl,
                                     const double *x,
                                     size_t n,
                                     double *v);

/**
 * Releases a controller. Null is ignored.
 *
 * # Safety
 * `ctrl` must come from this library and not have been freed already.
 */
void ks_controller_free(struct KsController *ctrl);

/**
 * Parses a surrogate model from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KsStatus ks_surrogate_from_json(const char *json, struct KsSurrogate **out);

/**
 * Writes `n`, `m` and `N` of a surrogate. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be valid.
 */
enum KsStatus ks_surrogate_dims(const struct KsSurrogate *model,
                                size_t *n,
                                size_t *m,
                                size_t *big_n);

/**
 * One-step prediction of the lifted state, `z⁺ = A z + B0 u + B̃ (u ⊗ z)`
 * with `z = Φ(x)`.
 *
 * # Safety
 * `x`, `u` and `z_next` must hold `n`, `m` and `big_n` doubles.
 */
enum KsStatus ks_surrogate_predict(const struct KsSurrogate *model,
                                   const double *x,
                                   size_t n,
                                   const double *u,
                                   size_t m,
                                   double *z_next,
                                   size_t big_n);

/**
 * Releases a surrogate. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not have been freed already.
 */
void ks_surrogate_free(struct KsSurrogate *model);

/**
 * Synthesizes a controller for `model` with the full-quadratic denominator
 * `1 + ‖z‖²` (α = 1), maximizing the smallest eigenvalue of `P`.
 *
 * Returns [`KsStatus::Infeasible`] or [`KsStatus::Inconclusive`] when no
 * certified controller is found; `*out` is untouched in that case.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum KsStatus ks_design(const struct KsSurrogate *model,
                        double c_x,
                        double c_u,
                        struct KsController **out);

/**
 * Feasibility synthesis for the single-zone building model
 * `x⁺ = x − 0.5u − 0.5ux` with `u_d = 0.01 + (1 + x)^{2α}`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KsStatus ks_design_building(uint32_t alpha, double c_x, double c_u, struct KsController **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPSOS_H */

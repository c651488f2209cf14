#ifndef QUANTRED_H
#define QUANTRED_H

/* Generated by cbindgen from quantred-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum QrStatus {
  QR_STATUS_OK = 0,
  // A required pointer argument was null.
  QR_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  QR_STATUS_INVALID_UTF8 = 2,
  // Invalid model, action, scenario or quadrature configuration.
  QR_STATUS_CONFIG = 3,
  // Invalid geometric input (wrong sizes, degenerate coordinates).
  QR_STATUS_INVALID = 4,
  // A numerical procedure failed.
  QR_STATUS_NUMERICAL = 5,
  // The stratification cross-check failed.
  QR_STATUS_STRATIFICATION = 6,
  // An index or size argument was out of range (including too-small buffers).
  QR_STATUS_OUT_OF_RANGE = 7,
  // An internal panic was caught.
  QR_STATUS_PANIC = 8,
} QrStatus;

// Section bundle selector.
typedef enum QrTwist {
  QR_TWIST_PLAIN = 0,
  QR_TWIST_HALFFORM = 1,
} QrTwist;

// A torus action on a product of projective spaces (opaque).
typedef struct QrAction QrAction;

// A Gram matrix of invariant sections with per-entry errors (opaque).
typedef struct QrGram QrGram;

// A validated scenario (opaque).
typedef struct QrScenario QrScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *qr_version(void);

// Message of the last failure on this thread, or null if the last call
// succeeded. The pointer stays valid until the next call on this thread.
const char *qr_last_error_message(void);

// Create one of the built-in examples (`"E1"`, `"E2"`, `"E3"`).
//
// # Safety
// `name` must be a valid NUL-terminated string and `out` a valid pointer to
// writable storage for a handle. The returned handle must be released with
// [`qr_action_free`].
enum QrStatus qr_action_from_example(const char *name, struct QrAction **out);

// Create an action from raw data.
//
// `factors` and `bundle_degrees` have `num_factors` entries; `weights` is a
// row-major `rank × N` matrix with `N = Σ (factors[j] + 1)`; the moment
// shift is `shift_num[a] / shift_den[a]` for `a < rank`.
//
// # Safety
// Every array pointer must be valid for reads of the stated length, and
// `out` must be valid for a write. Release the handle with
// [`qr_action_free`].
enum QrStatus qr_action_new(const size_t *factors,
                            const int64_t *bundle_degrees,
                            size_t num_factors,
                            const int64_t *weights,
                            size_t rank,
                            const int64_t *shift_num,
                            const int64_t *shift_den,
                            struct QrAction **out);

// Release an action handle (null is ignored).
//
// # Safety
// `action` must be null or a handle obtained from this library that has not
// been freed yet.
void qr_action_free(struct QrAction *action);

// Number of homogeneous coordinates `N` and torus rank `d`.
//
// # Safety
// `action` must be a live handle; `num_coords` and `rank` valid for writes.
enum QrStatus qr_action_shape(const struct QrAction *action, size_t *num_coords, size_t *rank);

// Dimension of the invariant subspace at tensor power `k`.
//
// # Safety
// `action` must be a live handle and `out` valid for a write.
enum QrStatus qr_invariant_dim(const struct QrAction *action,
                               uint32_t k,
                               enum QrTwist twist,
                               size_t *out);

// Number of orbit-type strata of the zero level set.
//
// # Safety
// `action` must be a live handle and `out` valid for a write.
enum QrStatus qr_strata_count(const struct QrAction *action, size_t *out);

// Moment map at the point with homogeneous coordinates `re + i·im`
// (each factor block is normalized internally). Writes `rank` values.
//
// # Safety
// `re` and `im` must be valid for `len` reads, `out` for `rank` writes.
enum QrStatus qr_moment_map(const struct QrAction *action,
                            const double *re,
                            const double *im,
                            size_t len,
                            double *out);

// Density `I_k` (plain) or `J_k` (half-form) at a zero-level point.
//
// # Safety
// `re` and `im` must be valid for `len` reads; `value` and `stderr` valid
// for writes.
enum QrStatus qr_density(const struct QrAction *action,
                         const double *re,
                         const double *im,
                         size_t len,
                         double k,
                         enum QrTwist twist,
                         double *value,
                         double *stderr);

// Upstairs Gram matrix of the invariant monomial basis.
//
// # Safety
// `action` must be a live handle and `out` valid for a write. Release the
// result with [`qr_gram_free`].
enum QrStatus qr_gram_upstairs(const struct QrAction *action,
                               uint32_t k,
                               enum QrTwist twist,
                               uint8_t norm_def,
                               size_t samples,
                               uint64_t seed,
                               struct QrGram **out);

// Downstairs (reduced) Gram matrix of the descended basis.
//
// # Safety
// `action` must be a live handle and `out` valid for a write. Release the
// result with [`qr_gram_free`].
enum QrStatus qr_gram_downstairs(const struct QrAction *action,
                                 uint32_t k,
                                 enum QrTwist twist,
                                 uint8_t norm_def,
                                 size_t samples,
                                 uint64_t seed,
                                 struct QrGram **out);

// Release a Gram handle (null is ignored).
//
// # Safety
// `gram` must be null or a live handle from this library.
void qr_gram_free(struct QrGram *gram);

// Matrix dimension.
//
// # Safety
// `gram` must be a live handle and `out` valid for a write.
enum QrStatus qr_gram_dim(const struct QrGram *gram, size_t *out);

// Entry `(i, j)` with its Monte Carlo standard error.
//
// # Safety
// `gram` must be a live handle; `re`, `im` and `stderr` valid for writes.
enum QrStatus qr_gram_entry(const struct QrGram *gram,
                            size_t i,
                            size_t j,
                            double *re,
                            double *im,
                            double *stderr);

// Unitarity defect `max |λ − 1|` of the generalized eigenproblem
// `G_down v = λ G_up v`.
//
// # Safety
// Both handles must be live; `value` and `stderr` valid for writes.
enum QrStatus qr_unitarity_defect(const struct QrGram *up,
                                  const struct QrGram *down,
                                  double *value,
                                  double *stderr);

// Parse and validate a scenario (JSON text). On failure every violation
// is listed in the error message, one per line.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` valid for a
// write. Release the handle with [`qr_scenario_free`].
enum QrStatus qr_scenario_from_json(const char *json, struct QrScenario **out);

// Release a scenario handle (null is ignored).
//
// # Safety
// `scenario` must be null or a live handle from this library.
void qr_scenario_free(struct QrScenario *scenario);

// Write the scenario description into `buf` (NUL-terminated). `needed`
// receives the full length including the terminator; if `buf_len` is too
// small nothing is written and [`QrStatus::OutOfRange`] is returned.
//
// # Safety
// `scenario` must be a live handle, `needed` valid for a write, and `buf`
// valid for `buf_len` writes (it may be null when `buf_len` is 0).
enum QrStatus qr_scenario_describe(const struct QrScenario *scenario,
                                   char *buf,
                                   size_t buf_len,
                                   size_t *needed);

// Run the scenario, writing its outputs into `out_dir` (or the scenario's
// own `output_dir` when `out_dir` is null).
//
// # Safety
// `scenario` must be a live handle; `out_dir` null or a valid
// NUL-terminated string.
enum QrStatus qr_scenario_run(const struct QrScenario *scenario, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUANTRED_H */

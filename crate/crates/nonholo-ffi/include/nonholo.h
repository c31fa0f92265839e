#ifndef NONHOLO_H
#define NONHOLO_H

/* Generated by cbindgen from the nonholo-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Integration method selector.
typedef enum NhMethod {
  NhMethod_Oracle = 0,
  NhMethod_Dirac = 1,
  NhMethod_Flannery = 2,
} NhMethod;

// Status codes mirroring the CLI exit codes, plus FFI-specific ones.
typedef enum NhStatus {
  NhStatus_Ok = 0,
  // Bad input: unknown scenario/method, schema or expression errors.
  NhStatus_Usage = 1,
  // Numerical failure (no convergence, singular systems, step floor).
  NhStatus_Numerical = 2,
  // Constraint drift exceeded the abort threshold.
  NhStatus_DriftAbort = 3,
  // A required pointer argument was null.
  NhStatus_NullPointer = 4,
  // A string argument was not valid UTF-8.
  NhStatus_InvalidUtf8 = 5,
  // An index was out of range.
  NhStatus_OutOfRange = 6,
} NhStatus;

// Opaque: a validated scenario (system plus initial data).
typedef struct NhEngine NhEngine;

// Opaque: a finished run with its sampled trajectory.
typedef struct NhRun NhRun;

// Run options; obtain defaults from [`nh_run_options_default`].
typedef struct NhRunOptions {
  double t_end;
  // Nonzero: adaptive Dormand-Prince 5(4); zero: fixed-step RK4.
  uint8_t adaptive;
  // Relative tolerance (adaptive).
  double rel_tol;
  // Absolute tolerance (adaptive).
  double abs_tol;
  // Step size (fixed-step).
  double dt;
  // Number of dense-output samples (at least 2).
  uint32_t samples;
  // Nonzero: post-step momentum projection.
  uint8_t stabilize_projection;
  // Abort threshold on max |g_k|; non-positive disables.
  double drift_abort;
} NhRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The
// pointer stays valid until the next failing call on the same thread;
// do not free it.
const char *nh_last_error(void);

// Default options: adaptive at 1e-10/1e-12, 2 seconds, 400 samples,
// drift abort at 1e-3, no stabilization.
struct NhRunOptions nh_run_options_default(void);

// Create an engine from a built-in scenario name.
//
// # Safety
// `name` must be a valid NUL-terminated string; `out` must be a valid
// pointer. On success `*out` owns the engine until [`nh_engine_free`].
enum NhStatus nh_engine_builtin(const char *name, struct NhEngine **out);

// Create an engine from scenario JSON text (the same schema the CLI
// loads from files).
//
// # Safety
// `json` must be a valid NUL-terminated string; `out` must be a valid
// pointer. On success `*out` owns the engine until [`nh_engine_free`].
enum NhStatus nh_engine_from_json(const char *json, struct NhEngine **out);

// # Safety
// `engine` must have come from an `nh_engine_*` constructor and not
// already be freed. Passing null is a no-op.
void nh_engine_free(struct NhEngine *engine);

// Coordinate count `n` and constraint count `m`.
//
// # Safety
// `engine` must be a live engine handle; `n` and `m` must each be valid
// or null (null outputs are skipped).
enum NhStatus nh_engine_dims(const struct NhEngine *engine, uint32_t *n, uint32_t *m);

// Integrate the engine's scenario and return a sampled trajectory.
//
// # Safety
// `engine` must be a live engine handle, `options` and `out` valid
// pointers. On success `*out` owns the run until [`nh_run_free`].
enum NhStatus nh_run(const struct NhEngine *engine,
                     enum NhMethod method,
                     const struct NhRunOptions *options,
                     struct NhRun **out);

// # Safety
// `run` must have come from [`nh_run`] and not already be freed.
// Passing null is a no-op.
void nh_run_free(struct NhRun *run);

// Number of samples in the run.
//
// # Safety
// `run` must be a live run handle (null yields 0).
uint32_t nh_run_len(const struct NhRun *run);

// Copy sample `index` into caller buffers. `q` and `p` need `n` slots,
// `lam` and `g` need `m`; any output pointer may be null to skip that
// field. For oracle runs `p` carries `dL/dq_dot` and `lam` the
// reference multipliers.
//
// # Safety
// `run` must be a live run handle and every non-null buffer large
// enough as described above.
enum NhStatus nh_run_sample(const struct NhRun *run,
                            uint32_t index,
                            double *t,
                            double *q,
                            double *p,
                            double *lam,
                            double *g,
                            double *energy,
                            double *h);

// Largest constraint residual seen at any accepted step.
//
// # Safety
// `run` must be a live run handle (null yields NaN).
double nh_run_max_residual(const struct NhRun *run);

// Write the run as CSV (same format as the CLI).
//
// # Safety
// `run` must be a live run handle and `path` a valid NUL-terminated
// string.
enum NhStatus nh_run_write_csv(const struct NhRun *run, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NONHOLO_H */

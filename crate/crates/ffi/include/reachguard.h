#ifndef REACHGUARD_H
#define REACHGUARD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  RG_STATUS_OK = 0,
  RG_STATUS_NULL_POINTER = 1,
  RG_STATUS_INVALID_ARGUMENT = 2,
  RG_STATUS_IO = 3,
  RG_STATUS_FORMAT = 4,
  RG_STATUS_INVALID_CONFIG = 5,
  RG_STATUS_CONFIG_MISMATCH = 6,
  RG_STATUS_NON_CONVERGENCE = 7,
  RG_STATUS_UNCALIBRATED = 8,
  RG_STATUS_DIMENSION_MISMATCH = 9,
  RG_STATUS_INSUFFICIENT_DATA = 10,
  RG_STATUS_PANIC = 11,
} RgStatus;

/**
 * Experiment configuration.
 */
typedef struct RgConfig RgConfig;

/**
 * A trained dynamics ensemble.
 */
typedef struct RgEnsemble RgEnsemble;

/**
 * A grid-based safety filter with its transition model.
 */
typedef struct RgFilter RgFilter;

/**
 * A value grid (ground truth or uncertainty-aware).
 */
typedef struct RgValueGrid RgValueGrid;

/**
 * Outcome of one filter step. `executed` is -1 on HALT; `u_fallback` is
 * NaN when no fallback was evaluated.
 */
typedef struct {
  int32_t executed;
  bool intervened;
  bool halted;
  double value_next;
  double u_task;
  double u_fallback;
} RgDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on this thread.
 */
const char *rg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rg_version(void);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
RgStatus rg_config_default(RgConfig **out);

/**
 * Load a TOML experiment config.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
RgStatus rg_config_load(const char *path, RgConfig **out);

/**
 * Write the config hash (64 hex chars plus NUL) into `buf`.
 *
 * # Safety
 * `cfg` must come from this library; `buf` must hold `len` bytes.
 */
RgStatus rg_config_hash(const RgConfig *cfg, char *buf, size_t len);

/**
 * # Safety
 * `cfg` must come from this library or be null.
 */
void rg_config_free(RgConfig *cfg);

/**
 * Advance the true dynamics one step. `state` is `[px, py, theta]`.
 *
 * # Safety
 * `cfg` must come from this library; `state` and `out` must point to 3 doubles.
 */
RgStatus rg_step(const RgConfig *cfg, const double *state, int32_t action, double *out);

/**
 * Order-2 Jensen-Renyi divergence of `k` diagonal Gaussians in `d`
 * dimensions. `means` and `variances` are row-major `k x d`.
 *
 * # Safety
 * `means` and `variances` must hold `k * d` doubles; `out` must be valid.
 */
RgStatus rg_jrd(const double *means, const double *variances, size_t k, size_t d, double *out);

/**
 * Conformal threshold from `n` trajectory scores. `*epsilon_hat` is
 * `+inf` and `*degenerate` true when the rank exceeds `n`.
 *
 * # Safety
 * `scores` must hold `n` doubles; the output pointers must be valid.
 */
RgStatus rg_calibrate(const double *scores,
                      size_t n,
                      double alpha_cal,
                      double *epsilon_hat,
                      bool *degenerate);

/**
 * Load a value grid written by the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
RgStatus rg_value_grid_load(const char *path, RgValueGrid **out);

/**
 * Solve the undiscounted ground-truth grid for `cfg`.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
RgStatus rg_value_grid_solve_ground_truth(const RgConfig *cfg, RgValueGrid **out);

/**
 * Interpolated value at `(px, py, theta)`.
 *
 * # Safety
 * `vg` must come from this library and `out` be a valid pointer.
 */
RgStatus rg_value_grid_value(const RgValueGrid *vg,
                             double px,
                             double py,
                             double theta,
                             double *out);

/**
 * # Safety
 * `vg` must come from this library or be null.
 */
void rg_value_grid_free(RgValueGrid *vg);

/**
 * Load an ensemble written by the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
RgStatus rg_ensemble_load(const char *path, RgEnsemble **out);

/**
 * # Safety
 * `ens` must come from this library or be null.
 */
void rg_ensemble_free(RgEnsemble *ens);

/**
 * Build a grid filter. The grid is copied; `ens` may be null to filter
 * with the true dynamics, in which case `epsilon` is ignored.
 *
 * # Safety
 * Non-null handles must come from this library; `out` must be valid.
 */
RgStatus rg_filter_new(const RgConfig *cfg,
                       const RgValueGrid *vg,
                       const RgEnsemble *ens,
                       double epsilon,
                       RgFilter **out);

/**
 * One filter decision for the task action `a_task` at `(px, py, theta)`.
 *
 * # Safety
 * `f` must come from this library and `out` be a valid pointer.
 */
RgStatus rg_filter_step(const RgFilter *f,
                        double px,
                        double py,
                        double theta,
                        int32_t a_task,
                        RgDecision *out);

/**
 * # Safety
 * `f` must come from this library or be null.
 */
void rg_filter_free(RgFilter *f);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REACHGUARD_H */

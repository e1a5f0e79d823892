#ifndef SAL_H
#define SAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SalStatus {
  SAL_STATUS_OK = 0,
  SAL_STATUS_NULL_POINTER = 1,
  SAL_STATUS_INVALID_ARGUMENT = 2,
  SAL_STATUS_DIMENSION_MISMATCH = 3,
  SAL_STATUS_DIVERGED = 4,
  SAL_STATUS_IO = 5,
  SAL_STATUS_PANIC = 6,
} SalStatus;

typedef enum SalLoss {
  SAL_LOSS_ABSOLUTE = 0,
  SAL_LOSS_SQUARED = 1,
  SAL_LOSS_LOG_LOSS = 2,
} SalLoss;

/**
 * A list of environments sharing one covariate dimension.
 */
typedef struct SalDataset SalDataset;

/**
 * A trained linear model and, for the robust trainer, its learned weights.
 */
typedef struct SalModel SalModel;

/**
 * Trainer hyperparameters; fill with [`sal_hyper_default`] first.
 */
typedef struct SalHyper {
  size_t outer_iters;
  size_t theta_iters;
  size_t w_iters;
  size_t ascent_steps;
  double step_x;
  double step_theta;
  double step_w;
  double lambda;
  double alpha;
  uint64_t seed;
} SalHyper;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the library.
 */
const char *sal_last_error(void);

/**
 * # Safety
 * `out` must point to writable memory for one `SalHyper`.
 */
enum SalStatus sal_hyper_default(struct SalHyper *out);

/**
 * Creates an empty dataset of covariate dimension `dim`; null if `dim == 0`.
 */
struct SalDataset *sal_dataset_new(size_t dim);

/**
 * Appends an environment of `n` rows: `x` is `n × dim`, `y` has `n` entries.
 *
 * # Safety
 * `ds` must come from [`sal_dataset_new`]; `x` and `y` must be readable for
 * `n * dim` and `n` values.
 */
enum SalStatus sal_dataset_add_env(struct SalDataset *ds,
                                   const double *x,
                                   const double *y,
                                   size_t n);

size_t sal_dataset_num_envs(const struct SalDataset *ds);

/**
 * # Safety
 * `ds` must be null or come from [`sal_dataset_new`] and not be used again.
 */
void sal_dataset_free(struct SalDataset *ds);

/**
 * Runs the robust trainer; on success `*out` receives a new model handle.
 *
 * # Safety
 * `ds` must come from [`sal_dataset_new`], `hyper` must point to a valid
 * `SalHyper`, and `out` must be writable.
 */
enum SalStatus sal_train(const struct SalDataset *ds,
                         const struct SalHyper *hyper,
                         enum SalLoss loss,
                         struct SalModel **out);

size_t sal_model_dim(const struct SalModel *m);

/**
 * Copies θ into `out`, which must hold `len == dim` values.
 *
 * # Safety
 * `m` must come from [`sal_train`]; `out` must be writable for `len` values.
 */
enum SalStatus sal_model_theta(const struct SalModel *m, double *out, size_t len);

/**
 * Copies the learned cost weights into `out` (`len == dim`).
 *
 * # Safety
 * As for [`sal_model_theta`].
 */
enum SalStatus sal_model_weights(const struct SalModel *m, double *out, size_t len);

/**
 * Predictions for the `n × d` row-major matrix `x` into `out` (`n` values):
 * regression values or class-1 probabilities.
 *
 * # Safety
 * `m` must come from [`sal_train`]; `x` readable for `n * d`, `out` writable for `n`.
 */
enum SalStatus sal_model_predict(const struct SalModel *m,
                                 const double *x,
                                 size_t n,
                                 size_t d,
                                 double *out);

/**
 * # Safety
 * `m` must be null or come from [`sal_train`] and not be used again.
 */
void sal_model_free(struct SalModel *m);

/**
 * `Σ (w_i (x1_i − x2_i))²`; `w` must satisfy `w ≥ 1, min w = 1`.
 *
 * # Safety
 * `x1`, `x2`, `w` readable for `d` values; `out` writable.
 */
enum SalStatus sal_cost_w(const double *x1,
                          const double *x2,
                          const double *w,
                          size_t d,
                          double *out);

/**
 * Euclidean projection of `raw` onto `{w ≥ 1, min w = 1}`, written to `out`.
 *
 * # Safety
 * `raw` readable and `out` writable for `d` values.
 */
enum SalStatus sal_project_weights(const double *raw, size_t d, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAL_H */

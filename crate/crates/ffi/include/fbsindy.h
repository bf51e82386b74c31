#ifndef FBSINDY_H
#define FBSINDY_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FbsStatus {
  FBS_STATUS_OK = 0,
  FBS_STATUS_NULL_POINTER = 1,
  FBS_STATUS_INVALID_ARGUMENT = 2,
  FBS_STATUS_IO = 3,
  FBS_STATUS_PARSE = 4,
  /**
   * Identification could not satisfy the sparsity or constraint requirements.
   */
  FBS_STATUS_INFEASIBLE = 5,
  /**
   * The output has no well-defined relative degree, or it is below the state dimension.
   */
  FBS_STATUS_NO_RELATIVE_DEGREE = 6,
  /**
   * Integration diverged or the control law hit a singularity.
   */
  FBS_STATUS_DIVERGED = 7,
  FBS_STATUS_PANIC = 8,
} FbsStatus;

typedef struct FbsController FbsController;

typedef struct FbsDataset FbsDataset;

typedef struct FbsModel FbsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. The pointer stays valid until the next call on the same
 * thread.
 */
const char *fbs_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void fbs_string_free(char *s);

/**
 * Reads a dataset CSV with columns `t,x1..xn,u,y` and optional `xdot1..xdotn`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FbsStatus fbs_dataset_load_csv(const char *path, struct FbsDataset **out);

/**
 * Simulates the forced Van der Pol oscillator under the default multisine
 * excitation; `x0` holds two entries and the result has `steps + 1` rows.
 *
 * # Safety
 * `x0` must point to two doubles; `out` must be writable.
 */
enum FbsStatus fbs_dataset_simulate_vdp(double theta,
                                        double sigma,
                                        double mu,
                                        const double *x0,
                                        double dt,
                                        size_t steps,
                                        struct FbsDataset **out);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t fbs_dataset_len(const struct FbsDataset *ds);

/**
 * Number of states, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t fbs_dataset_n_states(const struct FbsDataset *ds);

/**
 * Copies the output column into `buf`, which must hold exactly
 * `fbs_dataset_len` entries.
 *
 * # Safety
 * `ds` must be a live dataset handle; `buf` must point to `len` writable doubles.
 */
enum FbsStatus fbs_dataset_output(const struct FbsDataset *ds, double *buf, size_t len);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library that is not yet freed.
 */
void fbs_dataset_free(struct FbsDataset *ds);

/**
 * Identifies a sparse model. `options_json` may be NULL or a JSON object
 * with optional `library` and `regression` keys; missing keys use defaults.
 * Derivatives are estimated by finite differences when the dataset has none.
 *
 * # Safety
 * `ds` must be a live dataset handle; `options_json` NULL or NUL-terminated;
 * `out` writable.
 */
enum FbsStatus fbs_identify(const struct FbsDataset *ds,
                            const char *options_json,
                            struct FbsModel **out);

/**
 * # Safety
 * `json` must be NUL-terminated; `out` writable.
 */
enum FbsStatus fbs_model_from_json(const char *json, struct FbsModel **out);

/**
 * Serializes a model; free the result with [`fbs_string_free`].
 *
 * # Safety
 * `model` must be a live model handle; `out` writable.
 */
enum FbsStatus fbs_model_to_json(const struct FbsModel *model, char **out);

/**
 * Relative degree of the identified output; [`FbsStatus::NoRelativeDegree`]
 * when it is undefined up to the state dimension.
 *
 * # Safety
 * `model` must be a live model handle; `out` writable.
 */
enum FbsStatus fbs_model_relative_degree(const struct FbsModel *model, double tol, size_t *out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library that is not yet freed.
 */
void fbs_model_free(struct FbsModel *model);

/**
 * Feedback-linearizing controller with error-dynamics coefficients
 * `gains[0..n]` (`a_0, ..., a_{r-1}`).
 *
 * # Safety
 * `model` must be a live model handle; `gains` must point to `n` doubles;
 * `out` writable.
 */
enum FbsStatus fbs_synthesize_gains(const struct FbsModel *model,
                                    const double *gains,
                                    size_t n,
                                    struct FbsController **out);

/**
 * Controller whose error dynamics have the poles `re[k] + i im[k]`.
 * Complex poles must come in conjugate pairs.
 *
 * # Safety
 * `model` must be a live model handle; `re` and `im` must point to `n`
 * doubles; `out` writable.
 */
enum FbsStatus fbs_synthesize_poles(const struct FbsModel *model,
                                    const double *re,
                                    const double *im,
                                    size_t n,
                                    struct FbsController **out);

/**
 * Relative degree the controller was built for, or 0 for NULL.
 *
 * # Safety
 * `ctrl` must be NULL or a live controller handle.
 */
size_t fbs_controller_relative_degree(const struct FbsController *ctrl);

/**
 * Copies the gains into `buf`, which must hold exactly the relative degree
 * number of entries.
 *
 * # Safety
 * `ctrl` must be a live controller handle; `buf` must point to `len` writable doubles.
 */
enum FbsStatus fbs_controller_gains(const struct FbsController *ctrl, double *buf, size_t len);

/**
 * Evaluates `u(x, r, r', ..., r^(r))`. `x` holds the state and `refs` the
 * reference and its first `r` derivatives.
 *
 * # Safety
 * `ctrl` must be a live controller handle; `x` must point to `n_x` doubles,
 * `refs` to `n_refs` doubles; `out` writable.
 */
enum FbsStatus fbs_controller_evaluate(const struct FbsController *ctrl,
                                       const double *x,
                                       size_t n_x,
                                       const double *refs,
                                       size_t n_refs,
                                       double *out);

/**
 * Human-readable control law; free with [`fbs_string_free`].
 *
 * # Safety
 * `ctrl` must be a live controller handle; `out` writable.
 */
enum FbsStatus fbs_controller_law(const struct FbsController *ctrl, char **out);

/**
 * Regulates the Van der Pol oscillator to zero from `x0` (two entries).
 *
 * # Safety
 * `ctrl` must be a live controller handle; `x0` must point to two doubles;
 * `out` writable.
 */
enum FbsStatus fbs_controller_stabilize_vdp(const struct FbsController *ctrl,
                                            double theta,
                                            double sigma,
                                            double mu,
                                            const double *x0,
                                            double dt,
                                            size_t steps,
                                            struct FbsDataset **out);

/**
 * # Safety
 * `ctrl` must be NULL or a handle from this library that is not yet freed.
 */
void fbs_controller_free(struct FbsController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBSINDY_H */

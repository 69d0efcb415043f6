#ifndef PADRO_H
#define PADRO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum PadroStatus {
  PADRO_STATUS_OK = 0,
  PADRO_STATUS_NULL_POINTER = 1,
  PADRO_STATUS_INVALID_ARGUMENT = 2,
  PADRO_STATUS_DIMENSION_MISMATCH = 3,
  PADRO_STATUS_SINGULAR = 4,
  PADRO_STATUS_DIVERGED = 5,
  PADRO_STATUS_NOT_CONVERGED = 6,
  PADRO_STATUS_IO = 7,
  /**
   * Caller-provided buffer is too small; the required length is reported.
   */
  PADRO_STATUS_BUFFER_TOO_SMALL = 8,
  PADRO_STATUS_PANIC = 9,
} PadroStatus;

/**
 * Which end of the multiplier interval the solution sits on.
 */
typedef enum PadroBoundary {
  PADRO_BOUNDARY_INTERIOR = 0,
  PADRO_BOUNDARY_LOWER = 1,
  PADRO_BOUNDARY_UPPER = 2,
} PadroBoundary;

/**
 * Training pairs `(x_i, y_i)`.
 */
typedef struct PadroDataset PadroDataset;

/**
 * Output of a solve.
 */
typedef struct PadroSolution PadroSolution;

/**
 * Solver settings; start from [`padro_solve_options_default`].
 */
typedef struct PadroSolveOptions {
  double epsilon;
  double delta;
  /**
   * Largest admissible covariance eigenvalue.
   */
  double sigma_max;
  double initial_variance;
  double lambda_lo;
  double lambda_hi;
  double lambda_tolerance;
  size_t lambda_max_iters;
  size_t iters;
  double lr_g;
  double lr_q;
  size_t batch_anchors;
  uint64_t seed;
} PadroSolveOptions;

/**
 * Scalar results of a solve.
 */
typedef struct PadroSolutionSummary {
  double lambda;
  double value;
  double std_error;
  enum PadroBoundary boundary;
  size_t x_dim;
  size_t y_dim;
} PadroSolutionSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *padro_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *padro_version(void);

/**
 * Library defaults for the 2×2 inversion experiments.
 */
struct PadroSolveOptions padro_solve_options_default(void);

/**
 * Builds a dataset from `n` pairs; `xs` is `n × x_dim` and `ys` is
 * `n × y_dim`, both row-major.
 *
 * # Safety
 * `xs` and `ys` must point to `n·x_dim` and `n·y_dim` readable doubles and
 * `out` to writable storage for one handle.
 */
enum PadroStatus padro_dataset_new(const double *xs,
                                   const double *ys,
                                   size_t n,
                                   size_t x_dim,
                                   size_t y_dim,
                                   struct PadroDataset **out);

/**
 * Number of pairs, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle from [`padro_dataset_new`].
 */
size_t padro_dataset_len(const struct PadroDataset *dataset);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `dataset` must be null or a live handle that is not used afterwards.
 */
void padro_dataset_free(struct PadroDataset *dataset);

/**
 * Solves for the robust reconstructor with a Gaussian perturbation of the
 * measurement channel: isotropic when `anisotropic` is false, full
 * covariance otherwise.
 *
 * `forward` is the `y_dim × x_dim` operator. A null `options` means
 * [`padro_solve_options_default`].
 *
 * # Safety
 * `dataset` must be a live handle, `forward` must point to `y_dim·x_dim`
 * readable doubles, `options` must be null or readable, and `out` must be
 * writable storage for one handle.
 */
enum PadroStatus padro_solve(const struct PadroDataset *dataset,
                             const double *forward,
                             const struct PadroSolveOptions *options,
                             bool anisotropic,
                             struct PadroSolution **out);

/**
 * Copies the `x_dim × y_dim` reconstructor (row-major) into `out`.
 *
 * # Safety
 * `solution` must be a live handle and `out` must point to `len` writable doubles.
 */
enum PadroStatus padro_solution_reconstructor(const struct PadroSolution *solution,
                                              double *out,
                                              size_t len);

/**
 * Copies the `y_dim × y_dim` perturbation covariance (row-major) into `out`.
 *
 * # Safety
 * `solution` must be a live handle and `out` must point to `len` writable doubles.
 */
enum PadroStatus padro_solution_covariance(const struct PadroSolution *solution,
                                           double *out,
                                           size_t len);

/**
 * # Safety
 * `solution` must be a live handle and `out` writable.
 */
enum PadroStatus padro_solution_summary(const struct PadroSolution *solution,
                                        struct PadroSolutionSummary *out);

/**
 * Releases a solution; null is ignored.
 *
 * # Safety
 * `solution` must be null or a live handle that is not used afterwards.
 */
void padro_solution_free(struct PadroSolution *solution);

/**
 * Entropy-regularized transport value between two discrete measures with
 * Euclidean ground cost; atoms are row-major `n × dim` and `m × dim`.
 *
 * # Safety
 * Pointers must reference `n·dim`, `n`, `m·dim` and `m` readable doubles,
 * and `out_value` one writable double.
 */
enum PadroStatus padro_entropic_w1(const double *mu_atoms,
                                   const double *mu_weights,
                                   size_t n,
                                   const double *nu_atoms,
                                   const double *nu_weights,
                                   size_t m,
                                   size_t dim,
                                   double delta,
                                   double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PADRO_H */

#ifndef PLAB_H
#define PLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PlabStatus {
  PLAB_STATUS_OK = 0,
  PLAB_STATUS_NULL_POINTER = 1,
  PLAB_STATUS_SHAPE = 2,
  PLAB_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Degenerate input: too few classes, vanished between-class scatter,
   * zero-variance series, zero norms.
   */
  PLAB_STATUS_DEGENERATE = 4,
  PLAB_STATUS_NO_CONVERGENCE = 5,
  PLAB_STATUS_IO = 6,
  PLAB_STATUS_OTHER = 98,
  PLAB_STATUS_PANIC = 99,
} PlabStatus;

/**
 * Row-major dense matrix of doubles.
 */
typedef struct PlabMatrix PlabMatrix;

/**
 * Multi-layer perceptron with ReLU hidden layers.
 */
typedef struct PlabModel PlabModel;

/**
 * The four collapse metrics (NC2 as two numbers).
 */
typedef struct PlabCollapseReport {
  double nc1;
  double nc2_norm_cv;
  double nc2_angle_dev;
  double nc3;
  double nc4_mismatch;
} PlabCollapseReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or "" if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *plab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *plab_version(void);

/**
 * Copies `rows * cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` doubles; `out` must be writable.
 */
enum PlabStatus plab_matrix_new(size_t rows,
                                size_t cols,
                                const double *data,
                                struct PlabMatrix **out);

/**
 * # Safety
 * `m` must come from this library and not have been freed; null is ignored.
 */
void plab_matrix_free(struct PlabMatrix *m);

/**
 * # Safety
 * `m` must be a live matrix handle or null (returns 0).
 */
size_t plab_matrix_rows(const struct PlabMatrix *m);

/**
 * # Safety
 * `m` must be a live matrix handle or null (returns 0).
 */
size_t plab_matrix_cols(const struct PlabMatrix *m);

/**
 * Copies the matrix into `buf`, which must hold `len >= rows * cols` values.
 *
 * # Safety
 * `m` must be live; `buf` must point to `len` writable doubles.
 */
enum PlabStatus plab_matrix_copy_to(const struct PlabMatrix *m, double *buf, size_t len);

/**
 * Moore–Penrose pseudoinverse of a symmetric matrix; eigenvalues at or
 * below `rank_tol * lambda_max` are treated as zero.
 *
 * # Safety
 * `m` must be live; `out` must be writable.
 */
enum PlabStatus plab_pseudoinverse(const struct PlabMatrix *m,
                                   double rank_tol,
                                   struct PlabMatrix **out);

/**
 * He-initialised MLP `input_dim -> hidden[0] -> ... -> num_classes`.
 *
 * # Safety
 * `hidden` must point to `n_hidden` values; `out` must be writable.
 */
enum PlabStatus plab_model_new(size_t input_dim,
                               const size_t *hidden,
                               size_t n_hidden,
                               size_t num_classes,
                               uint64_t seed,
                               struct PlabModel **out);

/**
 * # Safety
 * `m` must come from this library and not have been freed; null is ignored.
 */
void plab_model_free(struct PlabModel *m);

/**
 * SHA-256 of the parameters, hex, written NUL-terminated into `buf`
 * (65 bytes needed).
 *
 * # Safety
 * `model` must be live; `buf` must point to `len` writable bytes.
 */
enum PlabStatus plab_model_param_hash(const struct PlabModel *model, char *buf, size_t len);

/**
 * Logits (`n x num_classes`) and penultimate features (`n x feature_dim`)
 * for a batch of inputs. Either output may be null to skip it.
 *
 * # Safety
 * `model` and `inputs` must be live; non-null outputs must be writable.
 */
enum PlabStatus plab_model_forward(const struct PlabModel *model,
                                   const struct PlabMatrix *inputs,
                                   struct PlabMatrix **logits_out,
                                   struct PlabMatrix **features_out);

/**
 * Copy of the last-layer weight (`num_classes x feature_dim`).
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum PlabStatus plab_model_classifier_weight(const struct PlabModel *model,
                                             struct PlabMatrix **out);

/**
 * One epoch of minibatch SGD with cross-entropy on `inputs` / `labels`.
 * The shuffle order is determined by `seed` and `epoch`.
 *
 * # Safety
 * `model` and `inputs` must be live; `labels` must hold `inputs` rows values.
 */
enum PlabStatus plab_model_train_epoch(struct PlabModel *model,
                                       const struct PlabMatrix *inputs,
                                       const uint32_t *labels,
                                       double learning_rate,
                                       double momentum,
                                       size_t batch_size,
                                       uint64_t seed,
                                       size_t epoch,
                                       double *mean_loss_out);

/**
 * New model with every parameter replaced by `lambda * p + b * eps`,
 * `eps ~ N(0, 2 / fan_in)`.
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum PlabStatus plab_shrink_perturb(const struct PlabModel *model,
                                    double lambda,
                                    double b,
                                    uint64_t seed,
                                    struct PlabModel **out);

/**
 * NC1 of `features` (`n x d`) with `labels` in `[0, num_classes)`.
 *
 * # Safety
 * `features` must be live; `labels` must hold `n` values; `out` writable.
 */
enum PlabStatus plab_nc1(const struct PlabMatrix *features,
                         const uint32_t *labels,
                         size_t num_classes,
                         double *out);

/**
 * All collapse metrics for `features` (`n x d`), classifier weight `w`
 * (`num_classes x d`) and `logits` (`n x num_classes`).
 *
 * # Safety
 * Handles must be live; `labels` must hold `n` values; `out` writable.
 */
enum PlabStatus plab_collapse_report(const struct PlabMatrix *features,
                                     const uint32_t *labels,
                                     size_t num_classes,
                                     const struct PlabMatrix *w,
                                     const struct PlabMatrix *logits,
                                     struct PlabCollapseReport *out);

/**
 * Pearson product-moment correlation of two length-`n` series.
 *
 * # Safety
 * `x` and `y` must point to `n` values; `out` must be writable.
 */
enum PlabStatus plab_pearson(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLAB_H */

#ifndef SPECMTM_H
#define SPECMTM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpecmtmStatus {
  SPECMTM_STATUS_OK = 0,
  SPECMTM_STATUS_NULL_POINTER = 1,
  SPECMTM_STATUS_INVALID_ARGUMENT = 2,
  SPECMTM_STATUS_SHAPE = 3,
  SPECMTM_STATUS_NON_FINITE = 4,
  SPECMTM_STATUS_PARSE = 5,
  SPECMTM_STATUS_CONFIG = 6,
  SPECMTM_STATUS_CHECKPOINT = 7,
  SPECMTM_STATUS_IO = 8,
  SPECMTM_STATUS_INTERNAL = 9,
} SpecmtmStatus;

/**
 * A loaded model together with the normalization it was trained with.
 */
typedef struct SpecmtmModel SpecmtmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity` bytes, into `buf`. Returns the full message
 * length in bytes (excluding the terminator); `buf` may be null to query
 * the length.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t specmtm_last_error(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *specmtm_version(void);

/**
 * Forward DFT of a real `t × d` matrix into `re` and `im` (`t × d` each).
 *
 * # Safety
 * `x` must hold `t * d` doubles; `re` and `im` must each have room for
 * `t * d` doubles.
 */
enum SpecmtmStatus specmtm_dft_forward(const double *x, size_t t, size_t d, double *re, double *im);

/**
 * Inverse DFT keeping the real part. When `residue` is not null it
 * receives the norm of the discarded imaginary part.
 *
 * # Safety
 * `re`, `im` must hold `t * d` doubles; `out` must have room for `t * d`
 * doubles; `residue` must be null or writable.
 */
enum SpecmtmStatus specmtm_dft_inverse(const double *re,
                                       const double *im,
                                       size_t t,
                                       size_t d,
                                       double *out,
                                       double *residue);

/**
 * The `order + 1` Bernstein basis values at `w ∈ [0, 1]`.
 *
 * # Safety
 * `out` must have room for `out_len` doubles.
 */
enum SpecmtmStatus specmtm_bernstein_basis(size_t order, double w, double *out, size_t out_len);

/**
 * Number of singular values of the `n × n` matrix `a` above
 * `rel_tol · σ_max`.
 *
 * # Safety
 * `a` must hold `n * n` doubles; `rank` must be writable.
 */
enum SpecmtmStatus specmtm_interaction_rank(const double *a,
                                            size_t n,
                                            double rel_tol,
                                            size_t *rank);

/**
 * Loads a checkpoint written by `specmtm pretrain`, `finetune` or
 * `probe`. On success `*out` owns a handle to release with
 * [`specmtm_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum SpecmtmStatus specmtm_model_load(const char *path, struct SpecmtmModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`specmtm_model_load`] that has
 * not been freed.
 */
void specmtm_model_free(struct SpecmtmModel *model);

/**
 * Series length, channel count and class count the model expects.
 *
 * # Safety
 * `model` must be a live handle; the output pointers must be writable.
 */
enum SpecmtmStatus specmtm_model_dims(const struct SpecmtmModel *model,
                                      size_t *length,
                                      size_t *channels,
                                      size_t *classes);

/**
 * Classifies one raw `length × channels` series. The checkpoint's
 * normalization is applied first. `logits` (length `classes`) may be
 * null; `label` receives the arg-max class.
 *
 * # Safety
 * `model` must be a live handle; `x` must hold `length * channels`
 * doubles; `logits` must be null or have room for `classes` doubles;
 * `label` must be writable.
 */
enum SpecmtmStatus specmtm_model_classify(const struct SpecmtmModel *model,
                                          const double *x,
                                          size_t length,
                                          size_t channels,
                                          double *logits,
                                          size_t classes,
                                          size_t *label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECMTM_H */

#ifndef FBE_H
#define FBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FbeScoreKind {
  FBE_SCORE_KIND_KNN = 0,
  FBE_SCORE_KIND_MAHALANOBIS = 1,
  FBE_SCORE_KIND_NNGUIDE = 2,
  FBE_SCORE_KIND_ENERGY = 3,
  FBE_SCORE_KIND_MSP = 4,
  FBE_SCORE_KIND_MAXLOGIT = 5,
} FbeScoreKind;

// Result code of every fallible call.
typedef enum FbeStatus {
  FBE_STATUS_OK = 0,
  FBE_STATUS_NULL_POINTER = 1,
  FBE_STATUS_INVALID_ARGUMENT = 2,
  FBE_STATUS_DIMENSION_MISMATCH = 3,
  FBE_STATUS_IO = 4,
  FBE_STATUS_FORMAT = 5,
  FBE_STATUS_NON_FINITE = 6,
  FBE_STATUS_SINGULAR = 7,
  FBE_STATUS_MISSING_LABELS = 8,
  FBE_STATUS_PANIC = 9,
} FbeStatus;

// Opaque feature bank.
typedef struct FbeBank FbeBank;

// Opaque per-dimension clamp boundaries.
typedef struct FbeBoundaries FbeBoundaries;

// Opaque linear classification head.
typedef struct FbeHead FbeHead;

// Score configuration. `k` is read for KNN and NNGuide only. A
// `react_percentile` of 0 (or less) disables ReAct clipping.
typedef struct FbeScoreSpec {
  enum FbeScoreKind kind;
  size_t k;
  double temperature;
  double react_percentile;
} FbeScoreSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library (static storage).
const char *fbe_version(void);

// Message for the last failed call on this thread ("" after a success).
// Valid until the next call into the library on the same thread.
const char *fbe_last_error_message(void);

// Copies an `n x m` row-major matrix (and optional `n` labels) into a new
// bank.
//
// # Safety
// `data` must point to `n * m` floats; `labels` must be null or point to
// `n` integers; `out` must be a valid pointer.
enum FbeStatus fbe_bank_from_data(const float *data,
                                  size_t n,
                                  size_t m,
                                  const int32_t *labels,
                                  struct FbeBank **out);

// Loads a bank. Files ending in `.csv` or `.txt` are parsed as CSV, with a
// trailing label column when `csv_labels` is non-zero; anything else is
// read as the binary format.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be a valid pointer.
enum FbeStatus fbe_bank_load(const char *path, int32_t csv_labels, struct FbeBank **out);

// Writes a bank in the binary format.
//
// # Safety
// `bank` must be a live handle; `path` a NUL-terminated string.
enum FbeStatus fbe_bank_save(const struct FbeBank *bank, const char *path);

// Number of rows, or 0 for a null handle.
//
// # Safety
// `bank` must be null or a live handle.
size_t fbe_bank_rows(const struct FbeBank *bank);

// Number of columns, or 0 for a null handle.
//
// # Safety
// `bank` must be null or a live handle.
size_t fbe_bank_cols(const struct FbeBank *bank);

// Copies the row-major features into `out`, which must hold exactly
// `rows * cols` floats.
//
// # Safety
// `bank` must be a live handle; `out` must point to `len` floats.
enum FbeStatus fbe_bank_copy_data(const struct FbeBank *bank, float *out, size_t len);

// # Safety
// `bank` must be null or a handle not yet freed.
void fbe_bank_free(struct FbeBank *bank);

// Fits per-dimension boundaries at percentile `lambda` in [0, 100].
//
// # Safety
// `bank` must be a live handle; `out` a valid pointer.
enum FbeStatus fbe_fit_boundaries(const struct FbeBank *bank,
                                  double lambda,
                                  struct FbeBoundaries **out);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid pointer.
enum FbeStatus fbe_boundaries_load(const char *path, struct FbeBoundaries **out);

// # Safety
// `b` must be a live handle; `path` a NUL-terminated string.
enum FbeStatus fbe_boundaries_save(const struct FbeBoundaries *b, const char *path);

// Dimension count, or 0 for a null handle.
//
// # Safety
// `b` must be null or a live handle.
size_t fbe_boundaries_dim(const struct FbeBoundaries *b);

// Copies the centers and radii into two buffers of `len == dim` floats.
//
// # Safety
// `b` must be a live handle; `mu` and `d_star` must each point to `len`
// floats.
enum FbeStatus fbe_boundaries_copy(const struct FbeBoundaries *b,
                                   float *mu,
                                   float *d_star,
                                   size_t len);

// # Safety
// `b` must be null or a handle not yet freed.
void fbe_boundaries_free(struct FbeBoundaries *b);

// Clamps `bank` onto `b` into a new bank. When `clamped` is non-null it
// receives the number of entries that were moved.
//
// # Safety
// `bank` and `b` must be live handles; `out` a valid pointer; `clamped`
// null or valid.
enum FbeStatus fbe_clamp_bank(const struct FbeBank *bank,
                              const struct FbeBoundaries *b,
                              struct FbeBank **out,
                              size_t *clamped);

// Fits boundaries at `lambda` and clamps the same bank onto them.
//
// # Safety
// `bank` must be a live handle; `out` a valid pointer.
enum FbeStatus fbe_enhance(const struct FbeBank *bank, double lambda, struct FbeBank **out);

// Copies a `c x m` row-major weight matrix and `c` biases into a new head.
//
// # Safety
// `weights` must point to `c * m` floats and `bias` to `c` floats; `out`
// must be a valid pointer.
enum FbeStatus fbe_head_from_data(const float *weights,
                                  const float *bias,
                                  size_t c,
                                  size_t m,
                                  struct FbeHead **out);

// # Safety
// `path` must be a NUL-terminated string; `out` a valid pointer.
enum FbeStatus fbe_head_load(const char *path, struct FbeHead **out);

// # Safety
// `head` must be a live handle; `path` a NUL-terminated string.
enum FbeStatus fbe_head_save(const struct FbeHead *head, const char *path);

// # Safety
// `head` must be null or a handle not yet freed.
void fbe_head_free(struct FbeHead *head);

// Scores every row of `queries` against `bank` (higher means more
// in-distribution) into `out`, which must hold exactly `rows(queries)`
// values. `head` may be null for KNN and Mahalanobis.
//
// # Safety
// Handles must be live (or null where allowed); `spec` must be valid;
// `out` must point to `len` doubles.
enum FbeStatus fbe_score(const struct FbeBank *bank,
                         const struct FbeHead *head,
                         const struct FbeScoreSpec *spec,
                         const struct FbeBank *queries,
                         double *out,
                         size_t len);

// Area under the ROC curve, ID as the positive class.
//
// # Safety
// `id` must point to `p` doubles, `ood` to `q`; `out` must be valid.
enum FbeStatus fbe_auroc(const double *id, size_t p, const double *ood, size_t q, double *out);

// False positive rate at the given true positive rate in (0, 1].
//
// # Safety
// `id` must point to `p` doubles, `ood` to `q`; `out` must be valid.
enum FbeStatus fbe_fpr_at_tpr(const double *id,
                              size_t p,
                              const double *ood,
                              size_t q,
                              double tpr,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBE_H */

#ifndef CNF_H
#define CNF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CnfGemmMethod {
  CNF_GEMM_METHOD_NAIVE = 0,
  CNF_GEMM_METHOD_TILED = 1,
  CNF_GEMM_METHOD_PARALLEL = 2,
} CnfGemmMethod;

typedef enum CnfStatus {
  CNF_STATUS_OK = 0,
  CNF_STATUS_NULL_POINTER = 1,
  CNF_STATUS_INVALID_ARGUMENT = 2,
  CNF_STATUS_DIMENSION_MISMATCH = 3,
  CNF_STATUS_IO = 4,
  CNF_STATUS_MODEL_FILE = 5,
  CNF_STATUS_DECODE = 6,
  CNF_STATUS_PANIC = 7,
} CnfStatus;

// Loaded model. Opaque to C.
typedef struct CnfModel CnfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null after a
// success. Valid until the next call into this library on the same thread.
const char *cnf_last_error(void);

// Library version as a static NUL-terminated string.
const char *cnf_version(void);

// Loads a model file and stores a new handle in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CnfStatus cnf_model_load(const char *path, struct CnfModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`cnf_model_load`] not yet freed.
void cnf_model_free(struct CnfModel *model);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cnf_model_num_classes(const struct CnfModel *model);

// Number of trainable parameters, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cnf_model_param_count(const struct CnfModel *model);

// Writes the expected per-image input shape (channels, height, width).
//
// # Safety
// `model` must be a live handle; `channels`, `height`, `width` valid pointers.
enum CnfStatus cnf_model_input_shape(const struct CnfModel *model,
                                     size_t *channels,
                                     size_t *height,
                                     size_t *width);

// Class probabilities for `n` images.
//
// `pixels` holds `n·C·H·W` values in [0, 1], image-major then CHW.
// `probs` receives `n·classes` values, one row per image.
//
// # Safety
// `model` must be a live handle; the buffers must hold the stated lengths.
enum CnfStatus cnf_model_predict(const struct CnfModel *model,
                                 const double *pixels,
                                 size_t pixels_len,
                                 size_t n,
                                 double *probs,
                                 size_t probs_len);

// `C = A·B` for row-major `A: m×n`, `B: n×w`, `C: m×w`.
//
// `tile` and `threads` are ignored by the naive method; a `threads` of 0
// selects the detected core count.
//
// # Safety
// `a`, `b` and `c` must hold `m·n`, `n·w` and `m·w` values.
enum CnfStatus cnf_matmul(enum CnfGemmMethod method,
                          const double *a,
                          const double *b,
                          double *c,
                          size_t m,
                          size_t n,
                          size_t w,
                          size_t tile,
                          size_t threads);

// Multi-class log loss of `n` probability rows of width `classes` against
// integer labels, with probabilities clipped away from 0 and 1.
//
// # Safety
// `probs` must hold `n·classes` values, `labels` `n` values, `out` be valid.
enum CnfStatus cnf_logloss(const double *probs,
                           const uint32_t *labels,
                           size_t n,
                           size_t classes,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CNF_H */

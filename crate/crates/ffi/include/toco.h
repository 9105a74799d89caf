#ifndef TOCO_H
#define TOCO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TocoSimilarity {
  TOCO_SIMILARITY_RAW = 0,
  TOCO_SIMILARITY_RELU = 1,
  TOCO_SIMILARITY_ABS = 2,
} TocoSimilarity;

typedef enum TocoStatus {
  TOCO_STATUS_OK = 0,
  TOCO_STATUS_NULL_POINTER = 1,
  TOCO_STATUS_SHAPE = 2,
  TOCO_STATUS_CONFIG = 3,
  TOCO_STATUS_IO = 4,
  TOCO_STATUS_CHECKPOINT = 5,
  TOCO_STATUS_NON_FINITE = 6,
  TOCO_STATUS_EMPTY_POSITIVES = 7,
  TOCO_STATUS_DATA = 8,
  TOCO_STATUS_PANIC = 9,
} TocoStatus;

/**
 * Opaque model handle.
 */
typedef struct TocoModel TocoModel;

typedef struct TocoModelInfo {
  size_t image_size;
  size_t patch_size;
  size_t depth;
  size_t dim;
  size_t aux_block;
  size_t classes;
} TocoModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread (empty after success).
 * The pointer stays valid until the next call on this thread.
 */
const char *toco_last_error(void);

/**
 * Loads a checkpoint from its JSON manifest path.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TocoStatus toco_model_load(const char *manifest_path, struct TocoModel **out);

/**
 * Creates a freshly initialized desk-preset model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TocoStatus toco_model_new_desk(uint64_t seed, struct TocoModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from a `toco_model_*` constructor and not be used again.
 */
void toco_model_free(struct TocoModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TocoStatus toco_model_info(const struct TocoModel *model, struct TocoModelInfo *out);

/**
 * Class activation maps for the classes flagged in `labels` (`classes`
 * bytes, nonzero = present). Writes `classes × (H/p) × (W/p)` values to
 * `out`, from the final block or, when `aux` is nonzero, the auxiliary one.
 *
 * # Safety
 * `image` holds `3·height·width` floats (channel-major), `labels` holds
 * `classes` bytes and `out` has room for the maps.
 */
enum TocoStatus toco_model_cam(const struct TocoModel *model,
                               const float *image,
                               size_t height,
                               size_t width,
                               const uint8_t *labels,
                               int32_t aux,
                               float *out);

/**
 * Decoder prediction: one label per pixel (0 = background, k = class k).
 *
 * # Safety
 * `image` holds `3·height·width` floats and `out` has `height·width` bytes.
 */
enum TocoStatus toco_model_predict(const struct TocoModel *model,
                                   const float *image,
                                   size_t height,
                                   size_t width,
                                   uint8_t *out);

/**
 * Mean pairwise cosine similarity of patch tokens after each block;
 * writes `depth` values.
 *
 * # Safety
 * `image` holds `3·height·width` floats and `out` has `depth` doubles.
 */
enum TocoStatus toco_model_block_similarity(const struct TocoModel *model,
                                            const float *image,
                                            size_t height,
                                            size_t width,
                                            double *out);

/**
 * Patch-token contrast loss for `n × dim` features (row-major) and one
 * label code per token (0 = background, k = class k, 255 = uncertain).
 *
 * # Safety
 * `features` holds `n·dim` doubles, `codes` holds `n` bytes, `out` is valid.
 */
enum TocoStatus toco_ptc_loss(const double *features,
                              size_t n,
                              size_t dim,
                              const uint8_t *codes,
                              enum TocoSimilarity mode,
                              double *out);

/**
 * Class-token contrast (InfoNCE) for anchor `p` (`dim`), `n_pos` positive
 * and `n_neg` negative keys (row-major).
 *
 * # Safety
 * Buffers hold the stated number of doubles; `out` is valid.
 */
enum TocoStatus toco_ctc_loss(const double *p,
                              const double *q_pos,
                              size_t n_pos,
                              const double *q_neg,
                              size_t n_neg,
                              size_t dim,
                              double tau,
                              double eps,
                              double *out);

/**
 * Mean IoU over `classes + 1` labels (background included) for flat label
 * arrays; 255 in `gts` is ignored.
 *
 * # Safety
 * `preds` and `gts` hold `n_pixels` bytes; `out` is valid.
 */
enum TocoStatus toco_miou(const uint8_t *preds,
                          const uint8_t *gts,
                          size_t n_pixels,
                          size_t classes,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOCO_H */

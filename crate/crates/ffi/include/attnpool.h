#ifndef ATTNPOOL_H
#define ATTNPOOL_H

/* Generated by cbindgen from attnpool-ffi. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Temporal pooling strategy for [`attnpool_predict`].
 */
typedef enum AttnpoolPooling {
  /**
   * Joint softmax over frames and classes, marginalized over frames.
   */
  ATTNPOOL_POOLING_TP = 0,
  /**
   * Softmax of the per-class mean score.
   */
  ATTNPOOL_POOLING_AVG = 1,
  /**
   * Softmax of the per-class max score.
   */
  ATTNPOOL_POOLING_MAX = 2,
  /**
   * Normalized product of per-frame posteriors.
   */
  ATTNPOOL_POOLING_INDEP = 3,
} AttnpoolPooling;

/**
 * Result of every fallible call in this interface.
 */
typedef enum AttnpoolStatus {
  ATTNPOOL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ATTNPOOL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ATTNPOOL_STATUS_INVALID_UTF8 = 2,
  /**
   * Inputs violate a documented precondition (shape mismatch, bad label…).
   */
  ATTNPOOL_STATUS_CONTRACT = 3,
  /**
   * A file exists but its contents are not a valid checkpoint/clip.
   */
  ATTNPOOL_STATUS_FORMAT = 4,
  /**
   * A numerical guard tripped (non-finite values).
   */
  ATTNPOOL_STATUS_NUMERIC = 5,
  /**
   * The operating system reported an I/O failure.
   */
  ATTNPOOL_STATUS_IO = 6,
  /**
   * An output buffer is smaller than the documented requirement.
   */
  ATTNPOOL_STATUS_BUFFER_TOO_SMALL = 7,
} AttnpoolStatus;

/**
 * One video's precomputed descriptor frames. Opaque; release with
 * [`attnpool_clip_free`].
 */
typedef struct AttnpoolClip AttnpoolClip;

/**
 * A trained model loaded from a checkpoint. Opaque; release with
 * [`attnpool_model_free`].
 */
typedef struct AttnpoolModel AttnpoolModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *attnpool_version(void);

/**
 * Message describing the most recent failure on the calling thread.
 *
 * The pointer stays valid until the next failing call on the same thread.
 * Before any failure it is the empty string, never null.
 */
const char *attnpool_last_error(void);

/**
 * Load a training checkpoint (`checkpoint.json`) into a model handle.
 *
 * On success writes the handle to `*out` and returns `Ok`; the caller owns
 * the handle and must release it with [`attnpool_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AttnpoolStatus attnpool_model_load(const char *path, struct AttnpoolModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from [`attnpool_model_load`], not yet freed.
 */
void attnpool_model_free(struct AttnpoolModel *model);

/**
 * Number of classes the model scores; 0 when `model` is null.
 *
 * # Safety
 * `model` must be null or a live handle from [`attnpool_model_load`].
 */
size_t attnpool_model_num_classes(const struct AttnpoolModel *model);

/**
 * Load a descriptor clip (`.feat` file) into a clip handle.
 *
 * On success writes the handle to `*out`; release it with
 * [`attnpool_clip_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AttnpoolStatus attnpool_clip_load(const char *path, struct AttnpoolClip **out);

/**
 * Release a clip handle. Null is a no-op.
 *
 * # Safety
 * `clip` must be a handle from [`attnpool_clip_load`], not yet freed.
 */
void attnpool_clip_free(struct AttnpoolClip *clip);

/**
 * Number of frames in the clip; 0 when `clip` is null.
 *
 * # Safety
 * `clip` must be null or a live handle from [`attnpool_clip_load`].
 */
size_t attnpool_clip_frames(const struct AttnpoolClip *clip);

/**
 * Classify a clip: writes one probability per class (they sum to 1) into
 * `probs`, which must hold at least [`attnpool_model_num_classes`] values.
 *
 * # Safety
 * `model` and `clip` must be live handles; `probs` must point to at least
 * `probs_capacity` writable doubles.
 */
enum AttnpoolStatus attnpool_predict(const struct AttnpoolModel *model,
                                     const struct AttnpoolClip *clip,
                                     enum AttnpoolPooling pooling,
                                     double *probs,
                                     size_t probs_capacity);

/**
 * Per-frame importance under temporal softmax pooling: writes one
 * probability per frame (they sum to 1) into `importance`, which must hold
 * at least [`attnpool_clip_frames`] values.
 *
 * # Safety
 * `model` and `clip` must be live handles; `importance` must point to at
 * least `capacity` writable doubles.
 */
enum AttnpoolStatus attnpool_frame_importance(const struct AttnpoolModel *model,
                                              const struct AttnpoolClip *clip,
                                              double *importance,
                                              size_t capacity);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ATTNPOOL_H */

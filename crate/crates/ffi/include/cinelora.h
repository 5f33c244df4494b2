#ifndef CINELORA_H
#define CINELORA_H

/* Generated from the Rust sources; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Zero is success; anything else is
 * explained by `cinelora_last_error()`.
 */
typedef enum CineloraStatus {
  CINELORA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CINELORA_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CINELORA_STATUS_INVALID_UTF8 = 2,
  CINELORA_STATUS_INVALID_ARGUMENT = 3,
  CINELORA_STATUS_INVALID_CONFIG = 4,
  CINELORA_STATUS_SHAPE_MISMATCH = 5,
  /**
   * A caption word is outside the fixed vocabulary.
   */
  CINELORA_STATUS_UNKNOWN_WORD = 6,
  /**
   * A checkpoint or adapter file is malformed.
   */
  CINELORA_STATUS_ARTIFACT = 7,
  /**
   * Model and artifact were built for different configurations.
   */
  CINELORA_STATUS_DIGEST_MISMATCH = 8,
  CINELORA_STATUS_IO = 9,
  CINELORA_STATUS_DATASET = 10,
  /**
   * A computation produced a non-finite value.
   */
  CINELORA_STATUS_NON_FINITE = 11,
  /**
   * A caller-supplied buffer has the wrong length.
   */
  CINELORA_STATUS_BUFFER_SIZE = 12,
  /**
   * An internal invariant failed; this is a bug in the library.
   */
  CINELORA_STATUS_INTERNAL_PANIC = 13,
} CineloraStatus;

/**
 * An opaque generated clip: frames plus the generation report.
 */
typedef struct CineloraClip CineloraClip;

/**
 * An opaque loaded model (plus any attached adapters).
 */
typedef struct CineloraModel CineloraModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message for the current thread's most recent failure. Never null;
 * empty before the first failure. Valid until this thread's next failing
 * call.
 */
const char *cinelora_last_error(void);

/**
 * The library version as a static string.
 */
const char *cinelora_version(void);

/**
 * Loads a model checkpoint. On success `*out` owns the model; release it
 * with `cinelora_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to pointer.
 */
enum CineloraStatus cinelora_model_load(const char *path, struct CineloraModel **out);

/**
 * Builds a fresh seeded model from a flat TOML config document (pass an
 * empty string for the defaults). On success `*out` owns the model.
 *
 * # Safety
 * `config_toml` must be a valid NUL-terminated string; `out` must be a
 * valid pointer to pointer.
 */
enum CineloraStatus cinelora_model_new(const char *config_toml,
                                       uint64_t seed,
                                       struct CineloraModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void cinelora_model_free(struct CineloraModel *model);

/**
 * Attaches an adapter file to the model (checked against the model's
 * config digest).
 *
 * # Safety
 * `model` must be a live handle; `path` a valid NUL-terminated string.
 */
enum CineloraStatus cinelora_model_attach_adapters(const struct CineloraModel *model,
                                                   const char *path);

/**
 * The model's frame geometry: channels, height, width. Any output pointer
 * may be null to skip that value.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be valid pointers.
 */
enum CineloraStatus cinelora_model_frame_dims(const struct CineloraModel *model,
                                              size_t *out_channels,
                                              size_t *out_height,
                                              size_t *out_width);

/**
 * Samples a clip. `first_frame` holds `channels·height·width` values in
 * `[-1, 1]` (planar C,H,W order); `caption` is tokenized against the
 * built-in vocabulary. On success `*out` owns the clip; release it with
 * `cinelora_clip_free`.
 *
 * # Safety
 * `model` must be a live handle; `first_frame` must point to
 * `first_frame_len` readable floats; `caption` must be a valid
 * NUL-terminated string; `out` must be a valid pointer to pointer.
 */
enum CineloraStatus cinelora_generate(const struct CineloraModel *model,
                                      const float *first_frame,
                                      size_t first_frame_len,
                                      const char *caption,
                                      size_t num_frames,
                                      double cfg_scale,
                                      size_t steps,
                                      uint64_t seed,
                                      size_t shards,
                                      size_t overlap,
                                      struct CineloraClip **out);

/**
 * Number of frames in a generated clip (0 for a null handle).
 *
 * # Safety
 * `clip` must be null or a live handle.
 */
size_t cinelora_clip_frames(const struct CineloraClip *clip);

/**
 * Values per frame (`channels·height·width`; 0 for a null handle).
 *
 * # Safety
 * `clip` must be null or a live handle.
 */
size_t cinelora_clip_frame_len(const struct CineloraClip *clip);

/**
 * Copies the whole clip (`frames·frame_len` signal-space floats,
 * nominally in `[-1, 1]`, frame major) into the caller's buffer.
 *
 * # Safety
 * `clip` must be a live handle; `out` must point to `out_len` writable
 * floats.
 */
enum CineloraStatus cinelora_clip_read(const struct CineloraClip *clip, float *out, size_t out_len);

/**
 * The clip's generation report as a JSON string, owned by the clip handle
 * (valid until `cinelora_clip_free`). Null for a null handle.
 *
 * # Safety
 * `clip` must be null or a live handle.
 */
const char *cinelora_clip_report_json(const struct CineloraClip *clip);

/**
 * Releases a clip handle. Null is a no-op.
 *
 * # Safety
 * `clip` must be null or a handle from this library, not yet freed.
 */
void cinelora_clip_free(struct CineloraClip *clip);

/**
 * The perceptual distance between two equal-shape clips, each laid out as
 * `frames·channels·height·width` floats in `[-1, 1]`. Both frame sides
 * must be at least 16.
 *
 * # Safety
 * `a` and `b` must each point to `frames·channels·height·width` readable
 * floats; `out` must be a valid pointer.
 */
enum CineloraStatus cinelora_perceptual_proxy(const float *a,
                                              const float *b,
                                              size_t frames,
                                              size_t channels,
                                              size_t height,
                                              size_t width,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CINELORA_H */

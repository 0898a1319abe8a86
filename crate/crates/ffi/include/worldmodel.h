#ifndef WORLDMODEL_H
#define WORLDMODEL_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define WM_MODALITY_IMAGE 1

#define WM_MODALITY_VIDEO 2

#define WM_MODALITY_AUDIO 4

typedef enum WmStatus {
  WM_STATUS_OK = 0,
  WM_STATUS_NULL_POINTER = 1,
  WM_STATUS_CONFIG = 2,
  WM_STATUS_DATA = 3,
  WM_STATUS_TRAIN = 4,
  WM_STATUS_PROVIDER = 5,
  WM_STATUS_INVALID_UTF8 = 6,
  WM_STATUS_BUFFER_TOO_SMALL = 7,
  WM_STATUS_PANIC = 8,
} WmStatus;

/**
 * World model with its parameters.
 */
typedef struct WmModel WmModel;

/**
 * Generated synthetic world.
 */
typedef struct WmWorld WmWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Bytes needed for the last error message, including the NUL.
 */
size_t wm_last_error_length(void);

/**
 * Copy the last error message of this thread into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum WmStatus wm_last_error_message(char *buf, size_t len);

/**
 * Generate a world with default settings.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum WmStatus wm_world_generate(uint64_t seed, struct WmWorld **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum WmStatus wm_world_load(const char *path, struct WmWorld **out);

/**
 * # Safety
 * `world` must come from this library and not be used afterwards. Null is ignored.
 */
void wm_world_free(struct WmWorld *world);

/**
 * Embedding width of the world's encoders; 0 for null.
 *
 * # Safety
 * `world` must be null or a live handle.
 */
size_t wm_world_d_enc(const struct WmWorld *world);

/**
 * Encode text with the world's text encoder into `out[0..len]`; `len` must be at least `d_enc`.
 *
 * # Safety
 * `world` must be a live handle, `text` NUL-terminated, `out` writable for `len` doubles.
 */
enum WmStatus wm_world_encode_text(const struct WmWorld *world,
                                   const char *text,
                                   double *out,
                                   size_t len);

/**
 * Fresh untrained model.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum WmStatus wm_model_new(uint64_t seed, size_t d_model, size_t d_enc, struct WmModel **out);

/**
 * Load a checkpoint, verifying component checksums.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid handle slot.
 */
enum WmStatus wm_model_load(const char *path, struct WmModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum WmStatus wm_model_save(const struct WmModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void wm_model_free(struct WmModel *model);

/**
 * Embedding width the model reads and writes; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t wm_model_d_enc(const struct WmModel *model);

/**
 * Predict the next state in the unified space.
 *
 * `state` holds three rows of `d_enc` doubles (image, video, audio); only rows
 * named in `present` are read. `action_embedding` has `d_enc` doubles. Rows of
 * `out` (same layout) named in `outputs` are written; the others are untouched.
 *
 * # Safety
 * Pointers must be valid for the sizes above and `action_text` NUL-terminated.
 */
enum WmStatus wm_model_predict(const struct WmModel *model,
                               const double *state,
                               uint32_t present,
                               const char *action_text,
                               const double *action_embedding,
                               uint32_t outputs,
                               double *out);

/**
 * SHA-256 hex of one component (`base`, `adapters`, `unified_heads`,
 * `render_heads`, `reflector`, `context_lift`); `len` must be at least 65.
 *
 * # Safety
 * `model` must be a live handle, `component` NUL-terminated, `buf` writable for `len` bytes.
 */
enum WmStatus wm_model_checksum(const struct WmModel *model,
                                const char *component,
                                char *buf,
                                size_t len);

/**
 * ROUGE-L F-score of two strings.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
enum WmStatus wm_rouge_l(const char *candidate, const char *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WORLDMODEL_H */

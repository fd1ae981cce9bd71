#ifndef SIFU_H
#define SIFU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum SifuStatus {
  SIFU_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  SIFU_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or not valid UTF-8.
   */
  SIFU_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The file could not be read.
   */
  SIFU_STATUS_IO = 3,
  /**
   * The file is not a valid checkpoint (bad magic, version, checksum or layout).
   */
  SIFU_STATUS_CHECKPOINT = 4,
  /**
   * Input text or token ids do not fit the model.
   */
  SIFU_STATUS_DATA = 5,
  /**
   * The caller's buffer is too small.
   */
  SIFU_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * An internal error; the handle should be considered unusable.
   */
  SIFU_STATUS_INTERNAL = 7,
} SifuStatus;

/**
 * Opaque model handle.
 */
typedef struct SifuModel SifuModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *sifu_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sifu_version(void);

/**
 * Loads a checkpoint file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SifuStatus sifu_model_load(const char *path, struct SifuModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sifu_model_load`] and not be used afterwards.
 */
void sifu_model_free(struct SifuModel *model);

/**
 * Vocabulary size, node dimension and maximum training sequence length.
 *
 * # Safety
 * `model` must be a live handle; each out pointer may be null to skip it.
 */
enum SifuStatus sifu_model_shape(const struct SifuModel *model,
                                 size_t *vocab_size,
                                 size_t *node_dim,
                                 size_t *max_seq_len);

/**
 * Total trainable parameter count.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SifuStatus sifu_model_param_count(const struct SifuModel *model, uint64_t *out);

/**
 * Encodes `text` into token ids. Writes the id count to `*len` and, when it
 * fits in `capacity`, the ids to `ids`; otherwise returns `BufferTooSmall`.
 *
 * # Safety
 * `text` must be NUL-terminated; `ids` must hold `capacity` elements (may be
 * null when `capacity` is 0); `len` must be valid.
 */
enum SifuStatus sifu_encode(const struct SifuModel *model,
                            const char *text,
                            uint32_t *ids,
                            size_t capacity,
                            size_t *len);

/**
 * Energy of every candidate next token after the context `ids[0..len]`.
 * `energies` must hold the vocabulary size.
 *
 * # Safety
 * `ids` must hold `len` elements and `energies` `capacity` elements.
 */
enum SifuStatus sifu_candidate_energies(const struct SifuModel *model,
                                        const uint32_t *ids,
                                        size_t len,
                                        float *energies,
                                        size_t capacity);

/**
 * Continues `prompt` by up to `max_new` tokens and writes the full text
 * (prompt included) to `*out`, to be released with [`sifu_string_free`].
 * A `temperature` of 0 decodes greedily; positive values sample with `seed`.
 *
 * # Safety
 * `prompt` must be NUL-terminated and `out` a valid pointer.
 */
enum SifuStatus sifu_generate(const struct SifuModel *model,
                              const char *prompt,
                              size_t max_new,
                              double temperature,
                              uint64_t seed,
                              char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sifu_string_free(char *s);

/**
 * Perplexity of `text`, cut into windows of the model's sequence length.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` a valid pointer.
 */
enum SifuStatus sifu_eval_perplexity(const struct SifuModel *model, const char *text, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIFU_H */

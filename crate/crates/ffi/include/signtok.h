#ifndef SIGNTOK_H
#define SIGNTOK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SigntokStatus {
  SIGNTOK_STATUS_OK = 0,
  SIGNTOK_STATUS_NULL_POINTER = 1,
  SIGNTOK_STATUS_ARGUMENT = 2,
  SIGNTOK_STATUS_SHAPE = 3,
  SIGNTOK_STATUS_STATE = 4,
  SIGNTOK_STATUS_COMPATIBILITY = 5,
  SIGNTOK_STATUS_CONFIG = 6,
  SIGNTOK_STATUS_IO = 7,
  SIGNTOK_STATUS_FORMAT = 8,
  SIGNTOK_STATUS_NON_FINITE = 9,
  SIGNTOK_STATUS_BUFFER_TOO_SMALL = 10,
  SIGNTOK_STATUS_PANIC = 11,
  SIGNTOK_STATUS_OTHER = 12,
} SigntokStatus;

/**
 * Finite scalar quantizer over fixed per-channel levels.
 */
typedef struct SigntokFsq SigntokFsq;

/**
 * The three trained models of one experiment.
 */
typedef struct SigntokStack SigntokStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t signtok_last_error(char *buf, size_t len);

/**
 * Static, NUL-terminated crate version.
 */
const char *signtok_version(void);

/**
 * # Safety
 * `levels` must point to `channels` values; `out` must be writable.
 */
enum SigntokStatus signtok_fsq_new(const uint32_t *levels,
                                   size_t channels,
                                   struct SigntokFsq **out);

/**
 * # Safety
 * `fsq` must come from [`signtok_fsq_new`] and not be used afterwards.
 */
void signtok_fsq_free(struct SigntokFsq *fsq);

/**
 * Codebook size, or 0 for a null handle.
 *
 * # Safety
 * `fsq` must be null or a live handle.
 */
uint32_t signtok_fsq_vocab_size(const struct SigntokFsq *fsq);

/**
 * Quantize `count` latent vectors of `channels` values each into packed
 * indices.
 *
 * # Safety
 * `latents` must hold `count * channels` values and `indices` `count`.
 */
enum SigntokStatus signtok_fsq_quantize(const struct SigntokFsq *fsq,
                                        const double *latents,
                                        size_t count,
                                        uint32_t *indices);

/**
 * Dequantize a packed index into `channels` values, normalized to
 * `[-1, 1]` when `normalized` is nonzero and raw codes otherwise.
 *
 * # Safety
 * `values` must have room for the handle's channel count.
 */
enum SigntokStatus signtok_fsq_dequantize(const struct SigntokFsq *fsq,
                                          uint32_t index,
                                          int32_t normalized,
                                          double *values);

/**
 * Normalized DTW between two row-major sequences of `dim`-vectors.
 *
 * # Safety
 * `a` must hold `na * dim` values, `b` `nb * dim`, `out` be writable.
 */
enum SigntokStatus signtok_dtw(const double *a,
                               size_t na,
                               const double *b,
                               size_t nb,
                               size_t dim,
                               double *out);

/**
 * Load the stack trained under `root` for the JSON config at
 * `config_path` (null for the default config).
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum SigntokStatus signtok_stack_open(const char *config_path,
                                      const char *root,
                                      struct SigntokStack **out);

/**
 * # Safety
 * `stack` must come from [`signtok_stack_open`] and not be used afterwards.
 */
void signtok_stack_free(struct SigntokStack *stack);

/**
 * Tokens per frame of the stack's translator, or 0 for a null handle.
 *
 * # Safety
 * `stack` must be null or a live handle.
 */
size_t signtok_stack_tokens_per_frame(const struct SigntokStack *stack);

/**
 * Translate a gloss sentence with the config's decoding. Writes the frame count to
 * `frames` and, if `capacity` allows, `frames * tokens_per_frame` indices
 * to `tokens`. Returns `BufferTooSmall` (with `frames` set) otherwise.
 *
 * # Safety
 * `glosses` must hold `len` values, `tokens` `capacity`, `frames` be writable.
 */
enum SigntokStatus signtok_stack_translate(const struct SigntokStack *stack,
                                           const size_t *glosses,
                                           size_t len,
                                           uint32_t *tokens,
                                           size_t capacity,
                                           size_t *frames);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIGNTOK_H */

#ifndef MUDIFF_H
#define MUDIFF_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MudiffStatus {
  MUDIFF_STATUS_OK = 0,
  MUDIFF_STATUS_NULL_POINTER = 1,
  MUDIFF_STATUS_INVALID_ARGUMENT = 2,
  MUDIFF_STATUS_SHAPE = 3,
  MUDIFF_STATUS_NON_FINITE = 4,
  MUDIFF_STATUS_CONFIG = 5,
  MUDIFF_STATUS_FORMAT = 6,
  MUDIFF_STATUS_IO = 7,
  MUDIFF_STATUS_BUFFER_TOO_SMALL = 8,
  MUDIFF_STATUS_PANIC = 9,
} MudiffStatus;

typedef struct MudiffDmae MudiffDmae;

typedef struct MudiffTcld MudiffTcld;

typedef struct MudiffDmaeInfo {
  size_t audio_channels;
  uint32_t sample_rate;
  size_t latent_channels;
  /**
   * Waveform samples per latent step.
   */
  size_t samples_per_latent;
  /**
   * Valid waveform lengths are multiples of this.
   */
  size_t length_granularity;
} MudiffDmaeInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mudiff_version(void);

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mudiff_last_error(void);

/**
 * Creates a randomly initialised autoencoder with the tiny preset.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum MudiffStatus mudiff_dmae_new_tiny(uint64_t seed, struct MudiffDmae **out);

/**
 * Loads the EMA weights of a stage-1 checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum MudiffStatus mudiff_dmae_load(const char *path, struct MudiffDmae **out);

/**
 * # Safety
 * `handle` must come from this library and not be used afterwards. Null is ignored.
 */
void mudiff_dmae_free(struct MudiffDmae *handle);

/**
 * # Safety
 * `handle` and `info` must be valid pointers.
 */
enum MudiffStatus mudiff_dmae_info(const struct MudiffDmae *handle, struct MudiffDmaeInfo *info);

/**
 * Encodes channel-major audio (`audio_channels × frames` values) into a
 * channel-major latent (`latent_channels × L` values).
 *
 * # Safety
 * `samples` must point to `audio_channels * frames` floats, `out` to `cap`
 * writable floats (may be null when `cap` is 0) and `written` must be valid.
 */
enum MudiffStatus mudiff_dmae_encode(const struct MudiffDmae *handle,
                                     const float *samples,
                                     size_t frames,
                                     float *out,
                                     size_t cap,
                                     size_t *written);

/**
 * Decodes a channel-major latent of `latent_len` steps with `steps` DDIM
 * steps from noise seeded by `seed`.
 *
 * # Safety
 * Same buffer rules as [`mudiff_dmae_encode`].
 */
enum MudiffStatus mudiff_dmae_decode(const struct MudiffDmae *handle,
                                     const float *latent,
                                     size_t latent_len,
                                     size_t steps,
                                     uint64_t seed,
                                     float *out,
                                     size_t cap,
                                     size_t *written);

/**
 * Creates a randomly initialised generator with the tiny preset.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum MudiffStatus mudiff_tcld_new_tiny(uint64_t seed, struct MudiffTcld **out);

/**
 * Loads the EMA weights of a stage-2 checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum MudiffStatus mudiff_tcld_load(const char *path, struct MudiffTcld **out);

/**
 * # Safety
 * `handle` must come from this library and not be used afterwards. Null is ignored.
 */
void mudiff_tcld_free(struct MudiffTcld *handle);

/**
 * Generates channel-major audio for `prompt`. A negative `cfg_scale` selects
 * the model's default guidance scale.
 *
 * # Safety
 * Handles must be valid, `prompt` NUL-terminated, and the buffer rules of
 * [`mudiff_dmae_encode`] apply to `out`, `cap` and `written`.
 */
enum MudiffStatus mudiff_generate(const struct MudiffTcld *tcld,
                                  const struct MudiffDmae *dmae,
                                  const char *prompt,
                                  size_t steps_gen,
                                  size_t steps_dec,
                                  float cfg_scale,
                                  uint64_t seed,
                                  float *out,
                                  size_t cap,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUDIFF_H */

/* C API for the recursive symbolic regeneration lab. */

#ifndef RSR_H
#define RSR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum RsrStatus {
  RSR_STATUS_OK = 0,
  /**
   * A pointer argument was null or a string was not valid UTF-8.
   */
  RSR_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Checkpoint file missing, corrupt, or version-mismatched.
   */
  RSR_STATUS_CHECKPOINT_ERROR = 2,
  /**
   * Bad perturbation/sampler configuration.
   */
  RSR_STATUS_CONFIG_ERROR = 3,
  /**
   * Model or metric evaluation failed.
   */
  RSR_STATUS_MODEL_ERROR = 4,
} RsrStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct RsrCheckpoint RsrCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of the current thread into `buf`
 * (truncating to `len - 1` bytes) and returns the full message length.
 * Safe to call with a null buffer to query the length.
 */
uintptr_t rsr_last_error(char *buf, uintptr_t len);

/**
 * Loads a checkpoint from a file. On success stores a handle in `out`;
 * release it with [`rsr_checkpoint_free`].
 */
enum RsrStatus rsr_checkpoint_load(const char *path, struct RsrCheckpoint **out);

void rsr_checkpoint_free(struct RsrCheckpoint *ckpt);

/**
 * Vocabulary size of a loaded checkpoint; 0 on null handle.
 */
uintptr_t rsr_vocab_size(const struct RsrCheckpoint *ckpt);

/**
 * Generates text. `temperature <= 0` means greedy decoding;
 * `perturb_json` may be null for clean generation. On success `out`
 * receives a heap string (free with [`rsr_string_free`]).
 */
enum RsrStatus rsr_generate(const struct RsrCheckpoint *ckpt,
                            const char *prompt,
                            uintptr_t steps,
                            double temperature,
                            uint64_t seed,
                            const char *perturb_json,
                            char **out);

/**
 * Perplexity of a text under the model, optionally through the
 * perturbation described by `perturb_json`.
 */
enum RsrStatus rsr_perplexity(const struct RsrCheckpoint *ckpt,
                              const char *text,
                              const char *perturb_json,
                              double *out);

/**
 * Lexical profile of a text as a JSON object string.
 */
enum RsrStatus rsr_lexical_profile_json(const struct RsrCheckpoint *ckpt,
                                        const char *text,
                                        char **out);

/**
 * Frees a string returned by this library.
 */
void rsr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSR_H */

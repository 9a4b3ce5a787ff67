#ifndef OPTLM_H
#define OPTLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared with the CLI exit codes.
 */
typedef enum OptlmStatus {
  OptlmStatus_Ok = 0,
  OptlmStatus_Internal = 1,
  OptlmStatus_Config = 2,
  OptlmStatus_Data = 3,
  OptlmStatus_Numeric = 4,
  OptlmStatus_Checkpoint = 5,
  /**
   * Null pointer, bad UTF-8 or an undersized buffer from the caller.
   */
  OptlmStatus_BadArgument = 6,
} OptlmStatus;

/**
 * How the option is chosen at each generation step.
 */
typedef enum OptlmLatentMode {
  OptlmLatentMode_PolicyArgmax = 0,
  OptlmLatentMode_PolicySample = 1,
  /**
   * Uses the `fixed_option` argument (1-based).
   */
  OptlmLatentMode_Fixed = 2,
} OptlmLatentMode;

/**
 * Opaque handle to a loaded model (frozen backbone plus, when the
 * checkpoint holds one, the option plug-in).
 */
typedef struct OptlmModel OptlmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message of the last failure on this thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length,
 * not counting the NUL.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
size_t optlm_last_error(char *buf, size_t len);

/**
 * Load a checkpoint file. On success `*out` owns the model; release it with
 * `optlm_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OptlmStatus optlm_model_load(const char *path, struct OptlmModel **out);

/**
 * Release a model returned by `optlm_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must come from `optlm_model_load` and not be freed twice.
 */
void optlm_model_free(struct OptlmModel *model);

/**
 * Vocabulary size of the loaded model.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t optlm_vocab_size(const struct OptlmModel *model);

/**
 * Number of options K, or 0 when the checkpoint has no plug-in.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t optlm_option_count(const struct OptlmModel *model);

/**
 * Generate `steps` tokens after `prefix`. `out_tokens` receives
 * `prefix_len + steps` tokens and `out_options` the 1-based option id used
 * at each step. `temperature <= 0` selects greedy decoding.
 *
 * # Safety
 * `model` must be live; `prefix` must hold `prefix_len` tokens;
 * `out_tokens` and `out_options` must have the capacities described above.
 */
enum OptlmStatus optlm_generate(const struct OptlmModel *model,
                                const uint32_t *prefix,
                                size_t prefix_len,
                                size_t steps,
                                enum OptlmLatentMode latent_mode,
                                size_t fixed_option,
                                double temperature,
                                uint64_t seed,
                                uint32_t *out_tokens,
                                uint32_t *out_options);

/**
 * Per-option view at the last position of `context`, as a JSON array of
 * `{option, weight, token}` records (weights from the policy, 1-based
 * option ids). The returned string must be released with
 * `optlm_string_free`.
 *
 * # Safety
 * `model` must be live, `context` must hold `context_len` tokens, and
 * `out` must be a valid pointer.
 */
enum OptlmStatus optlm_option_table_json(const struct OptlmModel *model,
                                         const uint32_t *context,
                                         size_t context_len,
                                         char **out);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void optlm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPTLM_H */

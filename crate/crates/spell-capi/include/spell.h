/* C interface for the spell active speaker detection library. */

#ifndef SPELL_H
#define SPELL_H

/* Generated by cbindgen from the spell-capi crate; regenerate with `cbindgen -c cbindgen.toml -o include/spell.h` instead of editing. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a library call. Zero means success; anything else is an
 * error whose detail is available from `spell_last_error_message`.
 */
typedef enum SpellStatus {
  SPELL_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  SPELL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  SPELL_STATUS_INVALID_UTF8 = 2,
  /**
   * The operating system refused a file operation.
   */
  SPELL_STATUS_IO_ERROR = 3,
  /**
   * A file existed but its contents were malformed.
   */
  SPELL_STATUS_PARSE_ERROR = 4,
  /**
   * Inputs were structurally valid but inconsistent (shape mismatches,
   * missing feature rows, bad labels, invalid hyperparameters).
   */
  SPELL_STATUS_INVALID_INPUT = 5,
  /**
   * A computation produced NaN or infinity.
   */
  SPELL_STATUS_NUMERIC_ERROR = 6,
  /**
   * An internal invariant failed; the library caught a panic.
   */
  SPELL_STATUS_PANIC = 7,
} SpellStatus;

/**
 * A loaded model plus its configuration. Opaque to C callers.
 */
typedef struct SpellDetector SpellDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Never NULL.
 */
const char *spell_version(void);

/**
 * Description of the most recent failure on the calling thread, or an
 * empty string if the last call succeeded. The pointer is invalidated by
 * the next library call on this thread.
 */
const char *spell_last_error_message(void);

/**
 * Loads a checkpoint from `ckpt_path` and writes a detector handle to
 * `out`. On failure `*out` is left untouched.
 *
 * # Safety
 * `ckpt_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpellStatus spell_detector_load(const char *ckpt_path, struct SpellDetector **out);

/**
 * Releases a detector. NULL is a no-op.
 *
 * # Safety
 * `detector` must be NULL or a pointer from `spell_detector_load` that
 * has not already been freed.
 */
void spell_detector_free(struct SpellDetector *detector);

/**
 * Number of trainable parameters in the loaded model.
 *
 * # Safety
 * `detector` must be a live handle; `out` must be a valid pointer.
 */
enum SpellStatus spell_detector_param_count(const struct SpellDetector *detector, uint64_t *out);

/**
 * Scores every box in a tracks file and writes a predictions CSV
 * (`video_id,time,entity_id,score`) to `out_csv_path`. The output is
 * byte-identical to the CLI `infer` subcommand given the same inputs.
 *
 * `chunk_size` is the maximum nodes per graph chunk and `tau` the
 * temporal edge threshold in seconds; pass 2000 and 0.9 for the
 * defaults used in training.
 *
 * # Safety
 * `detector` must be a live handle; the four path arguments must be
 * NUL-terminated strings.
 */
enum SpellStatus spell_detector_infer(const struct SpellDetector *detector,
                                      const char *tracks_path,
                                      const char *features_path,
                                      const char *features_index_path,
                                      uint64_t chunk_size,
                                      double tau,
                                      const char *out_csv_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPELL_H */

#ifndef SIDIFF_H
#define SIDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SidiffStatus {
  SIDIFF_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or malformed JSON argument.
   */
  SIDIFF_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A Rust panic was caught at the boundary.
   */
  SIDIFF_STATUS_PANIC = 2,
  SIDIFF_STATUS_TRANSPORT = 10,
  SIDIFF_STATUS_PROTOCOL = 11,
  SIDIFF_STATUS_EMPTY_COMPLETION = 12,
  SIDIFF_STATUS_SCHEMA_VIOLATION = 13,
  SIDIFF_STATUS_DIMENSION_MISMATCH = 14,
  SIDIFF_STATUS_GENERATION_REJECTED = 15,
  SIDIFF_STATUS_DECODE = 16,
  SIDIFF_STATUS_MISSING_BASE_IMAGE = 17,
  SIDIFF_STATUS_PRECONDITION = 18,
  SIDIFF_STATUS_MISSING_SLOT = 19,
  SIDIFF_STATUS_UNKNOWN_TEMPLATE = 20,
  SIDIFF_STATUS_UNKNOWN_NODE = 21,
  SIDIFF_STATUS_IO = 22,
  SIDIFF_STATUS_CORRUPT_STORE = 23,
  SIDIFF_STATUS_INVARIANT_VIOLATION = 24,
  SIDIFF_STATUS_UNKNOWN_ID = 25,
  SIDIFF_STATUS_CONFIG = 26,
  SIDIFF_STATUS_EMPTY_PROMPT = 27,
  SIDIFF_STATUS_NEEDS_TRAJECTORIES = 28,
  SIDIFF_STATUS_DUPLICATE_ID = 29,
} SidiffStatus;

/**
 * Opaque engine handle: effective configuration plus an open knowledge
 * base. Each run gets fresh backends.
 */
typedef struct SidiffEngine SidiffEngine;

/**
 * Opaque knowledge-base handle.
 */
typedef struct SidiffKb SidiffKb;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sidiff_version(void);

/**
 * Kind of the calling thread's last error (for example `"EmptyPrompt"`),
 * or NULL. Valid until the next call into this library on the same thread.
 */
const char *sidiff_last_error_kind(void);

/**
 * Human-readable message of the calling thread's last error, or NULL.
 */
const char *sidiff_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from an `out_json` parameter of this library and must not
 * be used afterwards.
 */
void sidiff_string_free(char *s);

/**
 * Opens (creating if needed) the knowledge base in directory `dir`. With
 * `dim == 0` an existing knowledge base is opened at its stored dimension.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SidiffStatus sidiff_kb_open(const char *dir, size_t dim, struct SidiffKb **out);

/**
 * Closes a knowledge base. NULL is ignored.
 *
 * # Safety
 * `kb` must come from [`sidiff_kb_open`] and must not be used afterwards.
 */
void sidiff_kb_free(struct SidiffKb *kb);

/**
 * Number of trajectories in `store` (`"gen"` or `"edit"`).
 *
 * # Safety
 * Pointers must be valid; `store` NUL-terminated.
 */
enum SidiffStatus sidiff_kb_count(const struct SidiffKb *kb, const char *store, size_t *out);

/**
 * Writes `store` to `path` as JSONL ordered by id.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated. `out_count` may be NULL.
 */
enum SidiffStatus sidiff_kb_export(const struct SidiffKb *kb,
                                   const char *store,
                                   const char *path,
                                   size_t *out_count);

/**
 * Imports a JSONL export into `store`, all or nothing.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated. `out_count` may be NULL.
 */
enum SidiffStatus sidiff_kb_import(const struct SidiffKb *kb,
                                   const char *store,
                                   const char *path,
                                   size_t *out_count);

/**
 * Top-`k` records of `store` by inner product with `vector` (normalized
 * first). Writes a JSON array of `{id, similarity, original_prompt}`.
 *
 * # Safety
 * `vector` must point to `len` floats; other pointers must be valid.
 */
enum SidiffStatus sidiff_kb_retrieve(const struct SidiffKb *kb,
                                     const char *store,
                                     const float *vector,
                                     size_t len,
                                     size_t k,
                                     char **out_json);

/**
 * Summarizes an evaluator report (JSON) into
 * `{aesthetic_mean, alignment_mean, overall}`.
 *
 * # Safety
 * `report_json` NUL-terminated; `out_json` valid.
 */
enum SidiffStatus sidiff_summarize(const char *report_json, char **out_json);

/**
 * Whether the report's overall score is strictly below `tau`.
 *
 * # Safety
 * `report_json` NUL-terminated; `out` valid.
 */
enum SidiffStatus sidiff_needs_edit(const char *report_json, double tau, bool *out);

/**
 * Creates an engine from flat TOML configuration text (NULL or empty for
 * defaults). The same keys as the CLI config file are accepted; the
 * environment is not consulted. Opens the configured knowledge base.
 *
 * # Safety
 * `config_toml` NULL or NUL-terminated; `out` valid.
 */
enum SidiffStatus sidiff_engine_new(const char *config_toml, struct SidiffEngine **out);

/**
 * Releases an engine. NULL is ignored.
 *
 * # Safety
 * `engine` must come from [`sidiff_engine_new`] and not be used afterwards.
 */
void sidiff_engine_free(struct SidiffEngine *engine);

/**
 * Runs one prompt, writes the run manifest under the configured `out`
 * directory and returns `{run_id, score, edits_used, trajectory_id_gen,
 * trajectory_id_edit, guidance_active, manifest}` as JSON. `run_id` may be
 * NULL for an id derived from prompt and seed.
 *
 * # Safety
 * `engine` valid; strings NULL (where allowed) or NUL-terminated.
 */
enum SidiffStatus sidiff_engine_run(const struct SidiffEngine *engine,
                                    const char *prompt,
                                    const char *run_id,
                                    char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIDIFF_H */

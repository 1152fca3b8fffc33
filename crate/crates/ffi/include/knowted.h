#ifndef KNOWTED_H
#define KNOWTED_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum KnowtedStatus {
  KNOWTED_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KNOWTED_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KNOWTED_STATUS_INVALID_UTF8 = 2,
  /**
   * A file could not be read.
   */
  KNOWTED_STATUS_IO = 3,
  /**
   * Malformed lexicon, patient file, timestamp or filter.
   */
  KNOWTED_STATUS_INVALID_INPUT = 4,
  KNOWTED_STATUS_UNKNOWN_CONCEPT = 5,
  /**
   * The concept exists but the operation does not apply to its type.
   */
  KNOWTED_STATUS_UNSUPPORTED = 6,
  /**
   * A lab frame or statistic has no data.
   */
  KNOWTED_STATUS_NO_DATA = 7,
  KNOWTED_STATUS_INTERNAL = 8,
  /**
   * The engine panicked; the handle should be discarded.
   */
  KNOWTED_STATUS_PANIC = 9,
} KnowtedStatus;

/**
 * A loaded lexicon with its recognizer, negation rules and prefix index.
 */
typedef struct KnowtedEngine KnowtedEngine;

/**
 * An ingested patient record.
 */
typedef struct KnowtedRecord KnowtedRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Never null; do not free.
 */
const char *knowted_version(void);

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call on this thread; do not free.
 */
const char *knowted_last_error(void);

/**
 * Release a string returned through an `out` argument. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void knowted_string_free(char *s);

/**
 * Load a lexicon directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum KnowtedStatus knowted_engine_load(const char *dir, struct KnowtedEngine **out);

/**
 * # Safety
 * `engine` must come from [`knowted_engine_load`] and not have been freed.
 */
void knowted_engine_free(struct KnowtedEngine *engine);

/**
 * Ingest a patient fixture file, validating it against the engine's lexicon.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_record_load(const struct KnowtedEngine *engine,
                                       const char *path,
                                       struct KnowtedRecord **out);

/**
 * Ingest a patient fixture given as a JSON string.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_record_from_json(const struct KnowtedEngine *engine,
                                            const char *json,
                                            struct KnowtedRecord **out);

/**
 * # Safety
 * `record` must come from this library and not have been freed.
 */
void knowted_record_free(struct KnowtedRecord *record);

/**
 * Recognize concepts in `text`. Writes a JSON array of annotated spans
 * with character offsets, negation and modifiers.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_scan(const struct KnowtedEngine *engine, const char *text, char **out);

/**
 * Completion response for the text before a caret: trigger decision,
 * type prior, parsed query and ranked suggestions. `record` may be null.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_complete(const struct KnowtedEngine *engine,
                                    const char *text_before_caret,
                                    const struct KnowtedRecord *record,
                                    char **out);

/**
 * Ranked concepts for free text. `filter` is a type name such as
 * `"medication"` or null; `record` may be null.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_search(const struct KnowtedEngine *engine,
                                  const char *text,
                                  const char *filter,
                                  const struct KnowtedRecord *record,
                                  char **out);

/**
 * Concepts a surface form maps to, as a JSON array.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_lookup(const struct KnowtedEngine *engine, const char *form, char **out);

/**
 * Assemble the card for `concept`. `as_of` is an RFC 3339 timestamp, or
 * null for the current time.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_card(const struct KnowtedEngine *engine,
                                const struct KnowtedRecord *record,
                                const char *concept,
                                const char *as_of,
                                char **out);

/**
 * Lab tree menu for a lab or vital-sign concept.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum KnowtedStatus knowted_lab_tree(const struct KnowtedEngine *engine,
                                    const struct KnowtedRecord *record,
                                    const char *concept,
                                    const char *as_of,
                                    char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KNOWTED_H */

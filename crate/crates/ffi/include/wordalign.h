#ifndef WORDALIGN_H
#define WORDALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  WA_STATUS_OK = 0,
  WA_STATUS_NULL_ARGUMENT = 1,
  WA_STATUS_INVALID_UTF8 = 2,
  WA_STATUS_IO = 3,
  WA_STATUS_PARSE = 4,
  WA_STATUS_INVALID_ARGUMENT = 5,
  WA_STATUS_INVALID_MODEL = 6,
  WA_STATUS_INTERNAL = 7,
} WaStatus;

/**
 * Trained alignment head with its encoder-decoder.
 */
typedef struct WaDiscAligner WaDiscAligner;

/**
 * Forward and backward statistical models.
 */
typedef struct WaStatAligner WaStatAligner;

typedef struct {
  double precision;
  double recall;
  double f1;
} WaScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *wa_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wa_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void wa_string_free(char *s);

/**
 * Loads a trained aligner written by `train-aligner`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
WaStatus wa_disc_load(const char *path, WaDiscAligner **out);

/**
 * # Safety
 * `handle` must be null or come from [`wa_disc_load`], freed once.
 */
void wa_disc_free(WaDiscAligner *handle);

/**
 * # Safety
 * `handle` must be live; `out` must be writable.
 */
WaStatus wa_disc_get_alpha(const WaDiscAligner *handle, double *out);

/**
 * Sets the decision threshold; must lie in [0, 1].
 *
 * # Safety
 * `handle` must be live.
 */
WaStatus wa_disc_set_alpha(WaDiscAligner *handle, double alpha);

/**
 * Aligns whitespace-tokenized `source` and `target`; writes Pharaoh `i-j`
 * links to `*out`.
 *
 * # Safety
 * `handle` must be live; strings NUL-terminated; `out` writable.
 */
WaStatus wa_disc_align(const WaDiscAligner *handle,
                       const char *source,
                       const char *target,
                       char **out);

/**
 * Loads `PREFIX.fwd` and `PREFIX.bwd` as written by `em-align --save-models`.
 *
 * # Safety
 * `prefix` must be NUL-terminated; `out` writable.
 */
WaStatus wa_stat_load(const char *prefix, WaStatAligner **out);

/**
 * # Safety
 * `handle` must be null or come from [`wa_stat_load`], freed once.
 */
void wa_stat_free(WaStatAligner *handle);

/**
 * Symmetrized alignment; `heuristic` is `intersection`, `union` or
 * `grow-diag-final-and`.
 *
 * # Safety
 * `handle` must be live; strings NUL-terminated; `out` writable.
 */
WaStatus wa_stat_align(const WaStatAligner *handle,
                       const char *source,
                       const char *target,
                       const char *heuristic,
                       char **out);

/**
 * Scores Pharaoh text `pred` against `gold` (one line per sentence);
 * `mode` is `macro` or `micro`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` writable.
 */
WaStatus wa_score(const char *pred, const char *gold, const char *mode, WaScore *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WORDALIGN_H */

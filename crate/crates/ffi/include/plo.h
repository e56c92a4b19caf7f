#ifndef PLO_H
#define PLO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PloStatus {
  PLO_STATUS_OK = 0,
  PLO_STATUS_NULL_POINTER = 1,
  PLO_STATUS_INVALID_ARGUMENT = 2,
  PLO_STATUS_SHAPE = 3,
  PLO_STATUS_PARSE = 4,
  PLO_STATUS_IO = 5,
  PLO_STATUS_CONFIG = 6,
  PLO_STATUS_PROTOCOL = 7,
  PLO_STATUS_VALIDATION = 8,
  PLO_STATUS_PANIC = 9,
} PloStatus;

/**
 * Evaluation report handle.
 */
typedef struct PloEvalReport PloEvalReport;

/**
 * Score matrix handle.
 */
typedef struct PloScoreMatrix PloScoreMatrix;

typedef struct PloMetrics {
  double seen;
  double unseen;
  double harmonic_mean;
  double auc;
} PloMetrics;

/**
 * One operating point; `bias` may be ±infinity at the curve ends.
 */
typedef struct PloCurvePoint {
  double bias;
  double seen;
  double unseen;
} PloCurvePoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *plo_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *plo_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void plo_string_free(char *s);

/**
 * Builds a score matrix from row-major `scores` (`rows × cols`), a per-column
 * unseen flag (nonzero = unseen) and per-row true column indices. Column
 * names are `c0`, `c1`, ...
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `out` must be writable.
 */
enum PloStatus plo_score_matrix_new(const double *scores,
                                    size_t rows,
                                    size_t cols,
                                    const uint8_t *unseen,
                                    const size_t *labels,
                                    struct PloScoreMatrix **out);

/**
 * Reads a score matrix CSV as written by `plo train` (`scores.csv`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PloStatus plo_score_matrix_read_csv(const char *path, struct PloScoreMatrix **out);

/**
 * # Safety
 * `m` must be null or a live handle from this library.
 */
void plo_score_matrix_free(struct PloScoreMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `rows` and `cols` must be writable.
 */
enum PloStatus plo_score_matrix_shape(const struct PloScoreMatrix *m, size_t *rows, size_t *cols);

/**
 * Sweeps the calibration bias and scores the matrix.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum PloStatus plo_evaluate(const struct PloScoreMatrix *m, struct PloEvalReport **out);

/**
 * # Safety
 * `r` must be null or a live handle from this library.
 */
void plo_report_free(struct PloEvalReport *r);

/**
 * # Safety
 * `r` must be a live handle; `out` must be writable.
 */
enum PloStatus plo_report_metrics(const struct PloEvalReport *r, struct PloMetrics *out);

/**
 * Number of points on the seen/unseen curve; 0 for a null handle.
 *
 * # Safety
 * `r` must be null or a live handle.
 */
size_t plo_report_curve_len(const struct PloEvalReport *r);

/**
 * # Safety
 * `r` must be a live handle; `out` must be writable.
 */
enum PloStatus plo_report_curve_point(const struct PloEvalReport *r,
                                      size_t index,
                                      struct PloCurvePoint *out);

/**
 * The report as JSON. Free the string with [`plo_string_free`].
 *
 * # Safety
 * `r` must be a live handle; `out` must be writable.
 */
enum PloStatus plo_report_to_json(const struct PloEvalReport *r, char **out);

/**
 * Checks one cue sequence for `state object` against the fixture rules.
 * `accepted` receives 1 or 0; when rejected and `reason` is non-null it
 * receives an owned string (free with [`plo_string_free`]), otherwise null.
 *
 * # Safety
 * `cues` must point to `count` NUL-terminated strings; other string
 * arguments must be NUL-terminated; out pointers must be writable or null
 * where allowed.
 */
enum PloStatus plo_validate_cues(const char *const *cues,
                                 size_t count,
                                 const char *state,
                                 const char *object,
                                 size_t n,
                                 uint8_t *accepted,
                                 char **reason);

/**
 * Renders the synthetic dataset into the new directory `out_dir`. With a
 * null `config_path` the default configuration is used.
 *
 * # Safety
 * String arguments must be NUL-terminated (`config_path` may be null).
 */
enum PloStatus plo_generate_dataset(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLO_H */

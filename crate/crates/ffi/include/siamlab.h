#ifndef SIAMLAB_H
#define SIAMLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SiamlabStatus {
  SIAMLAB_STATUS_OK = 0,
  SIAMLAB_STATUS_NULL_POINTER = 1,
  SIAMLAB_STATUS_INVALID_UTF8 = 2,
  SIAMLAB_STATUS_UNKNOWN_PRESET = 3,
  SIAMLAB_STATUS_INVALID_OVERRIDE = 4,
  SIAMLAB_STATUS_INVALID_PARAMETER = 5,
  SIAMLAB_STATUS_NOT_EXECUTED = 6,
  SIAMLAB_STATUS_OUT_OF_RANGE = 7,
  SIAMLAB_STATUS_IO = 8,
  SIAMLAB_STATUS_NUMERICAL = 9,
  SIAMLAB_STATUS_PANIC = 10,
} SiamlabStatus;

/**
 * A configured preset and, once executed, its results.
 */
typedef struct SiamlabRun SiamlabRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *siamlab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *siamlab_version(void);

uintptr_t siamlab_preset_count(void);

/**
 * Static name of preset `index`, or null when out of range.
 */
const char *siamlab_preset_name(uintptr_t index);

/**
 * Creates a run of `preset` with every seed set to `seed`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum SiamlabStatus siamlab_run_create(const char *preset, uint64_t seed, struct SiamlabRun **out);

/**
 * Applies one `key = value` override, discarding earlier results. The
 * settings are checked after each call, so lower `warmup` before `steps`.
 *
 * # Safety
 * `run` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum SiamlabStatus siamlab_run_set(struct SiamlabRun *run, const char *key, const char *value);

/**
 * Trains and probes according to the preset's protocol.
 *
 * # Safety
 * `run` must be a live handle.
 */
enum SiamlabStatus siamlab_run_execute(struct SiamlabRun *run);

/**
 * # Safety
 * `run` must be a live handle; `out` writable.
 */
enum SiamlabStatus siamlab_run_collapsed(const struct SiamlabRun *run, bool *out);

/**
 * Whether every qualitative claim attached to the preset held.
 *
 * # Safety
 * `run` must be a live handle; `out` writable.
 */
enum SiamlabStatus siamlab_run_expectation_held(const struct SiamlabRun *run, bool *out);

/**
 * Number of metric records in the trajectory.
 *
 * # Safety
 * `run` must be a live handle; `out` writable.
 */
enum SiamlabStatus siamlab_run_trajectory_len(const struct SiamlabRun *run, uintptr_t *out);

/**
 * Metric `name` (`step`, `loss`, `std`, `m_o`, `m_r`, `covariance`,
 * `entropy_lambda`, `probe_acc`, `lr`) of record `index`. An absent
 * entropy reads as NaN.
 *
 * # Safety
 * `run` must be a live handle; `name` NUL-terminated; `out` writable.
 */
enum SiamlabStatus siamlab_run_metric(const struct SiamlabRun *run,
                                      uintptr_t index,
                                      const char *name,
                                      double *out);

/**
 * A named probe reading produced by the preset's protocol.
 *
 * # Safety
 * `run` must be a live handle; `name` NUL-terminated; `out` writable.
 */
enum SiamlabStatus siamlab_run_reading(const struct SiamlabRun *run, const char *name, double *out);

/**
 * Trajectory as CSV. Release the string with [`siamlab_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` writable.
 */
enum SiamlabStatus siamlab_run_csv(const struct SiamlabRun *run, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void siamlab_string_free(char *s);

/**
 * # Safety
 * `run` must be null or a live handle, freed once.
 */
void siamlab_run_free(struct SiamlabRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIAMLAB_H */

#ifndef SOC_LANGEVIN_H
#define SOC_LANGEVIN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SocStatus {
  SOC_STATUS_OK = 0,
  SOC_STATUS_USAGE = 1,
  SOC_STATUS_NUMERICAL = 2,
  SOC_STATUS_IO = 3,
  SOC_STATUS_NULL_POINTER = 4,
  SOC_STATUS_PANIC = 5,
} SocStatus;

/**
 * Experiment configuration handle.
 */
typedef struct SocConfig SocConfig;

/**
 * Finished training run handle.
 */
typedef struct SocRun SocRun;

/**
 * One evaluation point of a training curve.
 */
typedef struct SocRecord {
  uint64_t epoch;
  double mean;
  double half_width;
} SocRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a configuration with defaults for environment `env`
 * (`fishing`, `hedging` or `oil`).
 *
 * # Safety
 * `env` must be a NUL-terminated string; `out` must be writable.
 */
enum SocStatus soc_config_new(const char *env, struct SocConfig **out);

/**
 * Sets one configuration key, using the same keys as the configuration file.
 * The configuration is left unchanged when the value is rejected.
 *
 * # Safety
 * `cfg` must come from `soc_config_new`; `key` and `value` must be
 * NUL-terminated strings.
 */
enum SocStatus soc_config_set(struct SocConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must come from `soc_config_new` or be null.
 */
void soc_config_free(struct SocConfig *cfg);

/**
 * Trains the configuration and returns the run.
 *
 * # Safety
 * `cfg` must be a live configuration; `out` must be writable.
 */
enum SocStatus soc_train(const struct SocConfig *cfg, struct SocRun **out);

/**
 * Number of records in the run, 0 for a null handle.
 *
 * # Safety
 * `run` must be a live run or null.
 */
size_t soc_run_len(const struct SocRun *run);

/**
 * # Safety
 * `run` must be a live run; `out` must be writable.
 */
enum SocStatus soc_run_record(const struct SocRun *run, size_t index, struct SocRecord *out);

/**
 * Writes the curve CSV (`time,f,f_plus,f_minus`) to `path`.
 *
 * # Safety
 * `run` must be a live run; `path` must be a NUL-terminated string.
 */
enum SocStatus soc_run_write_csv(const struct SocRun *run, const char *path);

/**
 * # Safety
 * `run` must come from `soc_train` or be null.
 */
void soc_run_free(struct SocRun *run);

/**
 * Largest relative difference between the pathwise gradient and central
 * finite differences with the given `step`, on two trajectories.
 *
 * # Safety
 * `cfg` must be a live configuration; `out` must be writable.
 */
enum SocStatus soc_gradcheck(const struct SocConfig *cfg, double step, double *out);

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *soc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *soc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOC_LANGEVIN_H */

#ifndef DIVERT_FFI_H
#define DIVERT_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every FFI call.
 */
typedef enum DivertStatus {
  DIVERT_STATUS_OK = 0,
  /**
   * Null pointer, non-UTF-8 string or invalid configuration.
   */
  DIVERT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Filesystem or decoding failure.
   */
  DIVERT_STATUS_IO = 2,
  /**
   * The run itself failed.
   */
  DIVERT_STATUS_RUN_FAILED = 3,
  /**
   * A metric was undefined for the given pool.
   */
  DIVERT_STATUS_METRIC = 4,
  /**
   * A panic was caught at the boundary.
   */
  DIVERT_STATUS_PANIC = 5,
} DivertStatus;

/**
 * Opaque handle over a loaded trajectory pool.
 */
typedef struct DivertPool DivertPool;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the underlying engine, as a static NUL-terminated string.
 */
const char *divert_version(void);

/**
 * Runs a configured evaluation: linear rollouts when `full_pipeline` is
 * false, rollouts plus branching when true. Outputs land where the config
 * says.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string; `error_out` may be
 * null or must point to a writable `char*`.
 */
enum DivertStatus divert_run_config(const char *config_path, bool full_pipeline, char **error_out);

/**
 * Runs the full analysis over a pool directory, writing the CSV outputs to
 * `out_dir` (or next to the pool when null).
 *
 * # Safety
 * `pool_dir` must be a valid NUL-terminated string; `out_dir` may be null;
 * `error_out` may be null or must point to a writable `char*`.
 */
enum DivertStatus divert_analyze(const char *pool_dir, const char *out_dir, char **error_out);

/**
 * Loads a trajectories JSONL file into an opaque pool handle.
 *
 * # Safety
 * `trajectories_path` must be a valid NUL-terminated string; `pool_out`
 * must point to a writable `DivertPool*`; `error_out` may be null.
 */
enum DivertStatus divert_pool_open(const char *trajectories_path,
                                   struct DivertPool **pool_out,
                                   char **error_out);

/**
 * Releases a pool handle. Null is a no-op.
 *
 * # Safety
 * `pool` must be null or a pointer previously returned by
 * [`divert_pool_open`], not yet closed.
 */
void divert_pool_close(struct DivertPool *pool);

/**
 * Number of trajectories in the pool.
 *
 * # Safety
 * `pool` must be a live handle; `len_out` must be writable.
 */
enum DivertStatus divert_pool_len(const struct DivertPool *pool, uintptr_t *len_out);

/**
 * Failed trajectories per 100K agent completion tokens.
 *
 * # Safety
 * `pool` must be a live handle; `value_out` must be writable; `error_out`
 * may be null.
 */
enum DivertStatus divert_pool_errors_per_100k(const struct DivertPool *pool,
                                              double *value_out,
                                              char **error_out);

/**
 * Number of distinct tasks with at least one failed trajectory.
 *
 * # Safety
 * `pool` must be a live handle; `count_out` must be writable.
 */
enum DivertStatus divert_pool_task_failure_count(const struct DivertPool *pool,
                                                 uintptr_t *count_out);

/**
 * Frees a string returned through an `error_out` parameter. Null is a
 * no-op.
 *
 * # Safety
 * `s` must be null or a pointer produced by this library, not yet freed.
 */
void divert_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DIVERT_FFI_H */

#ifndef GATE_H
#define GATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GateStatus {
  GATE_STATUS_OK = 0,
  GATE_STATUS_NULL_POINTER = 1,
  GATE_STATUS_INVALID_UTF8 = 2,
  GATE_STATUS_CHECKPOINT = 3,
  GATE_STATUS_UNKNOWN_TASK = 4,
  GATE_STATUS_SHAPE = 5,
  GATE_STATUS_BUFFER_TOO_SMALL = 6,
  GATE_STATUS_PANIC = 7,
  GATE_STATUS_OTHER = 8,
} GateStatus;

/**
 * A model loaded from a checkpoint directory.
 */
typedef struct GateHandle GateHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads the checkpoint directory at `path` into `*out`. Release it with
 * [`gate_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GateStatus gate_model_load(const char *path, struct GateHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must come from [`gate_model_load`] and not be used afterwards.
 */
void gate_model_free(struct GateHandle *h);

/**
 * `"gate"`, `"mtl"` or `"single"`; null for a null handle. The string lives
 * as long as the handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
const char *gate_model_kind(const struct GateHandle *h);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum GateStatus gate_model_input_dim(const struct GateHandle *h, size_t *out);

/**
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum GateStatus gate_model_task_count(const struct GateHandle *h, size_t *out);

/**
 * Name of task `index`. The pointer lives as long as the handle.
 *
 * # Safety
 * `h` must be a live handle and `out` a valid pointer.
 */
enum GateStatus gate_model_task_name(const struct GateHandle *h, size_t index, const char **out);

/**
 * Predicts `task` for `rows` row-major feature rows of width `cols`,
 * writing one value per row into `out`.
 *
 * # Safety
 * `features` must hold `rows * cols` values and `out` at least `out_len`.
 */
enum GateStatus gate_model_predict(const struct GateHandle *h,
                                   const char *task,
                                   const double *features,
                                   size_t rows,
                                   size_t cols,
                                   double *out,
                                   size_t out_len);

/**
 * Copies the calling thread's last error message into `buf`, truncated
 * and NUL-terminated, and returns the buffer size the full message needs.
 *
 * # Safety
 * `buf` must be null or hold `len` bytes.
 */
size_t gate_last_error(char *buf, size_t len);

/**
 * Library version as a static string.
 */
const char *gate_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GATE_H */

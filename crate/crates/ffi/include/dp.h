#ifndef DP_H
#define DP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DP_SHAPE_CLASSES 5

#define DP_WEIGHT_CLASSES 3

/**
 * Result of every fallible call. The non-zero codes follow the `dp`
 * binary's exit codes where they overlap.
 */
typedef enum {
  DP_STATUS_OK = 0,
  /**
   * Bad arguments: wrong sizes, unknown names, preset mismatch.
   */
  DP_STATUS_USAGE = 1,
  /**
   * Missing or malformed files.
   */
  DP_STATUS_DATA = 2,
  /**
   * Non-finite values or a broken invariant.
   */
  DP_STATUS_INVARIANT = 3,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  DP_STATUS_INVALID_ARGUMENT = 4,
  /**
   * The library panicked; this is a bug.
   */
  DP_STATUS_PANIC = 5,
} DpStatus;

/**
 * Running moving average of window probabilities for one sequence.
 */
typedef struct DpMaState DpMaState;

/**
 * Trained or freshly initialised network.
 */
typedef struct DpModel DpModel;

/**
 * Moving-average decision. Class indices follow the ordering used by
 * `dp_shape_class_name` and `dp_weight_class_name`.
 */
typedef struct {
  uint32_t shape;
  uint32_t weight;
  /**
   * Another class shared the maximum; the lowest index was taken.
   */
  bool shape_tie;
  bool weight_tie;
} DpDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *dp_last_error(void);

/**
 * Library version, static string.
 */
const char *dp_version(void);

/**
 * Static name of shape class `index`, or null when out of range.
 */
const char *dp_shape_class_name(uint32_t index);

/**
 * Static name of weight class `index`, or null when out of range.
 */
const char *dp_weight_class_name(uint32_t index);

/**
 * New randomly initialised model from a named preset (`toy`, `paper`,
 * optionally with `-rgb`).
 *
 * # Safety
 * `preset` must be a nul-terminated string and `out` a valid pointer.
 */
DpStatus dp_model_new(const char *preset, uint64_t seed, DpModel **out);

/**
 * Model from a checkpoint written by `dp train`.
 *
 * # Safety
 * `preset` and `checkpoint` must be nul-terminated strings and `out` a
 * valid pointer.
 */
DpStatus dp_model_load(const char *preset, const char *checkpoint, DpModel **out);

/**
 * # Safety
 * `model` must come from `dp_model_new`/`dp_model_load` and not be used
 * afterwards. Null is ignored.
 */
void dp_model_free(DpModel *model);

/**
 * Channels, height and width of one input frame.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
DpStatus dp_model_input_dims(const DpModel *model, size_t *channels, size_t *height, size_t *width);

/**
 * Class probabilities of one 3-frame window. `frames` holds three
 * consecutive frames back to back, each `channels * height * width`
 * values in row-major CHW order.
 *
 * # Safety
 * `model` must be a live handle, `frames` must point to `len` values and
 * the outputs to `DP_SHAPE_CLASSES` and `DP_WEIGHT_CLASSES` values.
 */
DpStatus dp_predict_window(const DpModel *model,
                           const double *frames,
                           size_t len,
                           double *shape_probs,
                           double *weight_probs);

/**
 * Empty moving-average state. Never null.
 */
DpMaState *dp_ma_new(void);

/**
 * # Safety
 * `state` must come from `dp_ma_new` and not be used afterwards. Null is
 * ignored.
 */
void dp_ma_free(DpMaState *state);

/**
 * Adds one window's probabilities.
 *
 * # Safety
 * `state` must be a live handle; `shape_probs` and `weight_probs` must
 * point to `DP_SHAPE_CLASSES` and `DP_WEIGHT_CLASSES` values.
 */
DpStatus dp_ma_update(DpMaState *state, const double *shape_probs, const double *weight_probs);

/**
 * Windows aggregated so far; 0 for a null handle.
 *
 * # Safety
 * `state` must be a live handle or null.
 */
size_t dp_ma_count(const DpMaState *state);

/**
 * Current moving average, written to the two output arrays.
 *
 * # Safety
 * As for `dp_ma_update`, with writable outputs.
 */
DpStatus dp_ma_current(const DpMaState *state, double *shape_out, double *weight_out);

/**
 * Argmax of the current moving average. A usage error before the first
 * window.
 *
 * # Safety
 * `state` must be a live handle and `out` a valid pointer.
 */
DpStatus dp_ma_decide(const DpMaState *state, DpDecision *out);

/**
 * Weight class index of a garment mass in grams.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
DpStatus dp_weight_bin(double mass_grams, uint32_t *out);

/**
 * Step-decay learning rate at `epoch`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
DpStatus dp_lr_at(double base_lr, size_t step_size, double decay, size_t epoch, double *out);

/**
 * Generates a built-in dataset spec (`toy` or `paper`) under `out_dir`.
 *
 * # Safety
 * `spec` and `out_dir` must be nul-terminated strings.
 */
DpStatus dp_generate(const char *spec, const char *out_dir, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DP_H */

/* C ABI for the bladescan inspection pipeline toolkit. */

#ifndef BLADESCAN_CAPI_H
#define BLADESCAN_CAPI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum BsStatus {
  BS_STATUS_OK = 0,
  /**
   * A pointer argument was null or an argument was out of range.
   */
  BS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Well-formed input violating a domain rule.
   */
  BS_STATUS_DOMAIN_ERROR = 2,
  /**
   * Structurally malformed input text.
   */
  BS_STATUS_PARSE_ERROR = 3,
  /**
   * The provided buffer cannot hold the result.
   */
  BS_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * Any other failure; see `bs_last_error`.
   */
  BS_STATUS_INTERNAL = 5,
} BsStatus;

/**
 * Opaque, growable list of detections (class id, pixel box, confidence).
 * Ground-truth boxes are represented with confidence 1.0.
 */
typedef struct BsDetections BsDetections;

/**
 * Tiling parameters; see `bs_tiling_config_default` for the defaults.
 */
typedef struct BsTilingConfig {
  uint32_t base_width;
  uint32_t base_height;
  double scale_factor;
  uint32_t scale_count;
  double overlap_ratio;
  double min_visibility;
  bool edge_clamp;
} BsTilingConfig;

/**
 * One crop rectangle produced by the tiler.
 */
typedef struct BsCropWindow {
  uint32_t scale_index;
  uint32_t origin_x;
  uint32_t origin_y;
  uint32_t width;
  uint32_t height;
} BsCropWindow;

/**
 * Detection metrics at one IoU threshold.
 */
typedef struct BsEvalResult {
  double precision;
  double recall;
  double f1;
  double accuracy;
  double map;
} BsEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *bs_version(void);

/**
 * Copies the last error message on this thread into `buffer` (always
 * NUL-terminated when capacity > 0) and returns the full message length
 * in bytes, excluding the terminator. Call with a null buffer to size it.
 *
 * # Safety
 * `buffer` must either be null or point to at least `capacity` writable
 * bytes.
 */
size_t bs_last_error(char *buffer, size_t capacity);

/**
 * Allocates an empty detection list; free with `bs_detections_free`.
 */
struct BsDetections *bs_detections_new(void);

/**
 * Frees a list returned by `bs_detections_new`. A null handle is a no-op.
 *
 * # Safety
 * `handle` must be null or a pointer previously returned by
 * `bs_detections_new` that has not been freed.
 */
void bs_detections_free(struct BsDetections *handle);

/**
 * Appends one detection. Coordinates are pixel-space corners with
 * `x1 < x2`, `y1 < y2`; confidence lies in [0, 1].
 *
 * # Safety
 * `handle` must be a valid, non-null list handle.
 */
enum BsStatus bs_detections_push(struct BsDetections *handle,
                                 uint32_t class_id,
                                 double x1,
                                 double y1,
                                 double x2,
                                 double y2,
                                 double confidence);

/**
 * Number of detections in the list.
 *
 * # Safety
 * `handle` must be null or a valid list handle; null yields 0.
 */
size_t bs_detections_len(const struct BsDetections *handle);

/**
 * Appends annotations parsed from normalized `class cx cy w h` label text,
 * with confidence fixed at 1.0.
 *
 * # Safety
 * `handle` must be a valid list handle; `text` must be a NUL-terminated
 * UTF-8 string.
 */
enum BsStatus bs_detections_parse_labels(struct BsDetections *handle,
                                         const char *text,
                                         uint32_t width,
                                         uint32_t height);

/**
 * Appends detections parsed from `class cx cy w h confidence` prediction
 * text.
 *
 * # Safety
 * Same contract as `bs_detections_parse_labels`.
 */
enum BsStatus bs_detections_parse_predictions(struct BsDetections *handle,
                                              const char *text,
                                              uint32_t width,
                                              uint32_t height);

struct BsTilingConfig bs_tiling_config_default(void);

/**
 * Enumerates the crop windows for an image. `out_count` always receives the
 * total window count. Pass a null buffer to size it; a non-null buffer with
 * insufficient capacity yields `BufferTooSmall` with nothing written.
 *
 * # Safety
 * `config` and `out_count` must be non-null; `out_windows` must be null or
 * point to at least `capacity` elements.
 */
enum BsStatus bs_tile_windows(uint32_t image_width,
                              uint32_t image_height,
                              const struct BsTilingConfig *config,
                              struct BsCropWindow *out_windows,
                              size_t capacity,
                              size_t *out_count);

/**
 * Renders the key-value fault summary text for a detection list over an
 * image of the given size. On success `*out_text` receives a heap string
 * owned by the caller; free it with `bs_string_free`.
 *
 * # Safety
 * `handle` must be a valid list handle and `out_text` non-null.
 */
enum BsStatus bs_kv_render(const struct BsDetections *handle,
                           uint32_t image_width,
                           uint32_t image_height,
                           double area_threshold_fraction,
                           char **out_text);

/**
 * Frees a string returned by this library. A null pointer is a no-op.
 *
 * # Safety
 * `text` must be null or a pointer previously returned by `bs_kv_render`
 * that has not been freed.
 */
void bs_string_free(char *text);

/**
 * Scores predictions against ground truths (confidences on the
 * ground-truth list are ignored). Both lists must share one image
 * coordinate frame.
 *
 * # Safety
 * All pointer arguments must be valid and non-null.
 */
enum BsStatus bs_evaluate(const struct BsDetections *predictions,
                          const struct BsDetections *ground_truths,
                          double iou_threshold,
                          struct BsEvalResult *out_result);

/**
 * Intersection over union of two pixel-space boxes; 0 for degenerate or
 * disjoint boxes.
 */
double bs_iou(double ax1,
              double ay1,
              double ax2,
              double ay2,
              double bx1,
              double by1,
              double bx2,
              double by2);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLADESCAN_CAPI_H */

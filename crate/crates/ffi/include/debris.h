#ifndef DEBRIS_H
#define DEBRIS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DebrisStatus {
  DEBRIS_STATUS_OK = 0,
  DEBRIS_STATUS_NULL_POINTER = 1,
  DEBRIS_STATUS_INVALID_ARGUMENT = 2,
  DEBRIS_STATUS_NOT_FOUND = 3,
  /**
   * Input data rejected: bad CSV, unknown label, undecodable image.
   */
  DEBRIS_STATUS_INVALID_DATA = 4,
  DEBRIS_STATUS_IO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  DEBRIS_STATUS_INTERNAL = 6,
} DebrisStatus;

typedef enum DebrisExportFormat {
  DEBRIS_EXPORT_FORMAT_CSV = 0,
  DEBRIS_EXPORT_FORMAT_GEO_JSON = 1,
} DebrisExportFormat;

/**
 * SIFT keypoints and descriptors of one grayscale image.
 */
typedef struct DebrisFeatures DebrisFeatures;

/**
 * An open survey store directory.
 */
typedef struct DebrisStore DebrisStore;

/**
 * Axis-aligned pixel box, corners in pixels.
 */
typedef struct DebrisBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} DebrisBox;

typedef struct DebrisImageMeta {
  double latitude;
  double longitude;
  /**
   * Meters above ground.
   */
  double altitude;
  /**
   * Degrees clockwise from north faced by the top of the frame.
   */
  double heading;
} DebrisImageMeta;

typedef struct DebrisCamera {
  double focal_length_m;
  double sensor_width_m;
  uint32_t image_width_px;
  uint32_t image_height_px;
} DebrisCamera;

typedef struct DebrisGeoPoint {
  double latitude;
  double longitude;
} DebrisGeoPoint;

/**
 * Bytes allocated by the library.
 */
typedef struct DebrisBuffer {
  uint8_t *data;
  size_t len;
} DebrisBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *debris_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *debris_version(void);

/**
 * # Safety
 * `a`, `b` and `out_iou` must be valid pointers.
 */
enum DebrisStatus debris_iou(const struct DebrisBox *a, const struct DebrisBox *b, double *out_iou);

/**
 * Greedy overlap suppression. Writes the indices of kept boxes, highest
 * score first, to `out_kept` (room for `n` entries) and their number to
 * `out_len`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` elements; `out_kept` room for `n`.
 */
enum DebrisStatus debris_suppress_overlaps(const struct DebrisBox *boxes,
                                           const double *scores,
                                           size_t n,
                                           double threshold,
                                           size_t *out_kept,
                                           size_t *out_len);

/**
 * Ground sample distance in meters per pixel.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DebrisStatus debris_gsd(const struct DebrisImageMeta *meta_in,
                             const struct DebrisCamera *cam,
                             double *out_gsd);

/**
 * Ground position of pixel `(px, py)`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DebrisStatus debris_pixel_to_geo(const struct DebrisImageMeta *meta_in,
                                      const struct DebrisCamera *cam,
                                      double px,
                                      double py,
                                      struct DebrisGeoPoint *out_point);

/**
 * Great-circle distance in meters.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DebrisStatus debris_haversine(const struct DebrisGeoPoint *a,
                                   const struct DebrisGeoPoint *b,
                                   double *out_m);

/**
 * Extract SIFT features from a row-major grayscale image with values in
 * `[0, 1]`.
 *
 * # Safety
 * `pixels` must hold `width * height` floats.
 */
enum DebrisStatus debris_features_extract(const float *pixels,
                                          size_t width,
                                          size_t height,
                                          struct DebrisFeatures **out_features);

/**
 * Number of keypoints.
 *
 * # Safety
 * `features` must come from [`debris_features_extract`].
 */
enum DebrisStatus debris_features_len(const struct DebrisFeatures *features, size_t *out_len);

/**
 * # Safety
 * `features` must come from [`debris_features_extract`] and not be used
 * afterwards. Null is ignored.
 */
void debris_features_free(struct DebrisFeatures *features);

/**
 * Ratio-test matches from `a` to `b`, one-to-one.
 *
 * # Safety
 * Handles must be live; `out_count` valid.
 */
enum DebrisStatus debris_features_match(const struct DebrisFeatures *a,
                                        const struct DebrisFeatures *b,
                                        float ratio,
                                        size_t *out_count);

/**
 * Duplicate verdict with the default ratio: true when the better matching
 * direction reaches `min_matches`.
 *
 * # Safety
 * Handles must be live; out pointers valid. `out_count` may be null.
 */
enum DebrisStatus debris_features_is_duplicate(const struct DebrisFeatures *a,
                                               const struct DebrisFeatures *b,
                                               size_t min_matches,
                                               bool *out_duplicate,
                                               size_t *out_count);

/**
 * Open (or create) a store directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_store` valid.
 */
enum DebrisStatus debris_store_open(const char *path, struct DebrisStore **out_store);

/**
 * # Safety
 * `store` must come from [`debris_store_open`] and not be used afterwards.
 * Null is ignored.
 */
void debris_store_free(struct DebrisStore *store);

/**
 * Number of records in a survey.
 *
 * # Safety
 * `store` must be live; strings NUL-terminated.
 */
enum DebrisStatus debris_store_record_count(const struct DebrisStore *store,
                                            const char *survey_id,
                                            size_t *out_count);

/**
 * Replace a survey's records with a CSV export, creating the survey when
 * needed. Writes the number of imported records to `out_count` (may be null).
 *
 * # Safety
 * `store` must be live; `data` must hold `len` bytes.
 */
enum DebrisStatus debris_store_import_csv(const struct DebrisStore *store,
                                          const char *survey_id,
                                          const uint8_t *data,
                                          size_t len,
                                          size_t *out_count);

/**
 * Export a survey as CSV or GeoJSON into a new buffer.
 *
 * # Safety
 * `store` must be live; `out_buffer` valid. Free the result with
 * [`debris_buffer_free`].
 */
enum DebrisStatus debris_store_export(const struct DebrisStore *store,
                                      const char *survey_id,
                                      enum DebrisExportFormat format,
                                      struct DebrisBuffer *out_buffer);

/**
 * # Safety
 * `buffer` must have been filled by this library and not freed before.
 */
void debris_buffer_free(struct DebrisBuffer *buffer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEBRIS_H */

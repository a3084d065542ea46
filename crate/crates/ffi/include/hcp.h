#ifndef HCP_H
#define HCP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values match the CLI exit statuses.
typedef enum HcpStatus {
  HCP_STATUS_OK = 0,
  // Bad argument, including null pointers and malformed UTF-8 paths.
  HCP_STATUS_USAGE = 2,
  HCP_STATUS_IO = 3,
  HCP_STATUS_FORMAT = 4,
  HCP_STATUS_DATA = 5,
  HCP_STATUS_STAGE_MISMATCH = 6,
  HCP_STATUS_NUMERIC = 7,
  // A Rust panic was caught at the boundary.
  HCP_STATUS_INTERNAL = 8,
} HcpStatus;

// Training stage recorded in a checkpoint.
typedef enum HcpStage {
  HCP_STAGE_PRETRAIN = 0,
  HCP_STAGE_IFT = 1,
  HCP_STAGE_HFT = 2,
} HcpStage;

// A loaded checkpoint plus, optionally, the objectness model used to
// propose hypotheses.
typedef struct HcpClassifier HcpClassifier;

// Axis-aligned box in pixels, half-open on the right and bottom.
typedef struct HcpBox {
  size_t x0;
  size_t y0;
  size_t width;
  size_t height;
} HcpBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *hcp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hcp_version(void);

// Loads a checkpoint and, if `objectness_path` is non-null, an objectness
// model. Prediction settings take the library defaults.
//
// # Safety
// Paths must be NUL-terminated strings or (for `objectness_path`) null;
// `out` must be a valid pointer.
enum HcpStatus hcp_classifier_load(const char *checkpoint_path,
                                   const char *objectness_path,
                                   struct HcpClassifier **out);

// # Safety
// `handle` must come from [`hcp_classifier_load`] and not be used afterwards.
void hcp_classifier_free(struct HcpClassifier *handle);

// Number of class scores [`hcp_classifier_predict`] writes; 0 for a null handle.
//
// # Safety
// `handle` must be null or a live classifier.
size_t hcp_classifier_num_classes(const struct HcpClassifier *handle);

// # Safety
// `handle` must be a live classifier.
enum HcpStatus hcp_classifier_stage(const struct HcpClassifier *handle, enum HcpStage *out);

// Scores an interleaved RGB8 image of `width * height * 3` bytes.
//
// An hft checkpoint with an objectness model predicts through hypotheses;
// any other checkpoint scores the whole image. `scores` must hold
// `scores_len >= hcp_classifier_num_classes(handle)` values.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum HcpStatus hcp_classifier_predict(const struct HcpClassifier *handle,
                                      const uint8_t *rgb,
                                      size_t width,
                                      size_t height,
                                      double *scores,
                                      size_t scores_len);

// Intersection over union of two boxes; 0 when both are empty.
double hcp_iou(struct HcpBox a, struct HcpBox b);

// 11-point average precision of `n` scores against 0/1 labels.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be valid.
enum HcpStatus hcp_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HCP_H */

#ifndef PERSONVLAD_H
#define PERSONVLAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum PvStatus {
  PV_OK = 0,
  PV_ERR_NULL_POINTER = 1,
  PV_ERR_INVALID_ARGUMENT = 2,
  PV_ERR_IO = 3,
  PV_ERR_FORMAT = 4,
  PV_ERR_MISSING_IDENTITIES = 5,
  PV_ERR_CONFIG = 6,
  PV_ERR_PANIC = 7,
} PvStatus;

// Trained network loaded from a checkpoint. Create with
// [`pv_model_load`], release with [`pv_model_free`].
typedef struct PvModel PvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *pv_last_error(void);

// Loads a checkpoint written by the `train` command. On success `*out`
// owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PvStatus pv_model_load(const char *path, struct PvModel **out);

// Releases a handle from [`pv_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void pv_model_free(struct PvModel *model);

// Length of one descriptor, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t pv_model_descriptor_dim(const struct PvModel *model);

// Writes the expected clip extent `(frames, height, width)` to `out[0..3]`.
//
// # Safety
// `model` must be a live handle and `out` must hold 3 values.
enum PvStatus pv_model_input_shape(const struct PvModel *model, size_t *out);

// Embeds `clip_count` clips laid out as `[clip][channel 3][frame][row][col]`
// with the extent from [`pv_model_input_shape`]. Writes
// `clip_count * descriptor_dim` values to `out`.
//
// # Safety
// `clips` must hold `clip_count * 3 * frames * height * width` values and
// `out` must hold `out_len` values.
enum PvStatus pv_model_embed_clips(const struct PvModel *model,
                                   const float *clips,
                                   size_t clip_count,
                                   float *out,
                                   size_t out_len);

// Descriptor of a whole tracklet laid out as `[channel 3][frame][row][col]`
// with `frame_count` frames: split into clips of the model's length
// overlapping by `overlap` frames, embedded, averaged and renormalized.
// Writes `descriptor_dim` values to `out`.
//
// # Safety
// `frames` must hold `3 * frame_count * height * width` values and `out`
// must hold `out_len` values.
enum PvStatus pv_model_describe_tracklet(const struct PvModel *model,
                                         const float *frames,
                                         size_t frame_count,
                                         size_t overlap,
                                         float *out,
                                         size_t out_len);

// Scores probes against a gallery by Euclidean distance. Gallery entries
// sharing both identity and camera with a probe are ignored for that
// probe. Writes the CMC curve for ranks `1..=max_rank` to `out_cmc` and
// the mean average precision to `out_map`. Fails with
// `PV_ERR_MISSING_IDENTITIES` when some probe has no eligible match.
//
// # Safety
// Descriptor arrays must hold `count * dim` values, identity and camera
// arrays `count` values, `out_cmc` `max_rank` values and `out_map` one.
enum PvStatus pv_retrieval_metrics(const float *probe_descriptors,
                                   const int64_t *probe_identities,
                                   const uint32_t *probe_cameras,
                                   size_t probe_count,
                                   const float *gallery_descriptors,
                                   const int64_t *gallery_identities,
                                   const uint32_t *gallery_cameras,
                                   size_t gallery_count,
                                   size_t dim,
                                   size_t max_rank,
                                   double *out_cmc,
                                   double *out_map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERSONVLAD_H */

#ifndef DMM_H
#define DMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DmmStatus {
  DMM_STATUS_OK = 0,
  DMM_STATUS_NULL_POINTER = 1,
  DMM_STATUS_IO = 2,
  DMM_STATUS_FORMAT = 3,
  DMM_STATUS_INVALID_ARGUMENT = 4,
  DMM_STATUS_NUMERIC = 5,
  DMM_STATUS_CONFIG = 6,
  DMM_STATUS_PANIC = 7,
} DmmStatus;

typedef enum DmmScheme {
  DMM_SCHEME_UNIFORM = 0,
  DMM_SCHEME_DATASIZE = 1,
} DmmScheme;

// Opaque checkpoint handle.
typedef struct DmmCheckpoint DmmCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *dmm_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DmmStatus dmm_checkpoint_load(const char *path, struct DmmCheckpoint **out);

// Writes a checkpoint file.
//
// # Safety
// `ckpt` must come from this library and `path` be nul-terminated.
enum DmmStatus dmm_checkpoint_save(const struct DmmCheckpoint *ckpt, const char *path);

// Releases a checkpoint handle. Null is ignored.
//
// # Safety
// `ckpt` must come from this library and not be used afterwards.
void dmm_checkpoint_free(struct DmmCheckpoint *ckpt);

// Total number of trainable scalars, or 0 for a null handle.
//
// # Safety
// `ckpt` must be null or come from this library.
size_t dmm_checkpoint_num_params(const struct DmmCheckpoint *ckpt);

// Number of scalars in one input sample, or 0 for a null handle.
//
// # Safety
// `ckpt` must be null or come from this library.
size_t dmm_checkpoint_input_size(const struct DmmCheckpoint *ckpt);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `ckpt` must be null or come from this library.
size_t dmm_checkpoint_num_classes(const struct DmmCheckpoint *ckpt);

// Eval-mode class probabilities for `batch` samples laid out row-major in
// `inputs`. `probs` must hold `batch * num_classes` floats.
//
// # Safety
// `inputs` must point to `batch * input_size` floats and `probs` to
// `probs_len` writable floats.
enum DmmStatus dmm_checkpoint_predict(const struct DmmCheckpoint *ckpt,
                                      const float *inputs,
                                      size_t batch,
                                      float *probs,
                                      size_t probs_len);

// Pools `k` groups of per-channel moments. `means` and `vars` are `k`
// rows of `channels` floats; `counts` holds `k` sample counts.
//
// # Safety
// Input pointers must cover the sizes above; outputs must hold `channels`
// floats (mean, var) and one count.
enum DmmStatus dmm_merge_buffers(size_t k,
                                 size_t channels,
                                 const float *means,
                                 const float *vars,
                                 const uint64_t *counts,
                                 float *out_mean,
                                 float *out_var,
                                 uint64_t *out_count);

// Merges `k` domain checkpoints fine-tuned from `base` and returns the
// merged checkpoint with pooled buffers. `tau` is an absolute outlier
// threshold, or negative for mean plus one standard deviation.
// `outliers`, if not null, receives `k` flags (1 for outliers).
//
// # Safety
// `models` must point to `k` valid handles and `outliers` be null or hold
// `k` bytes.
enum DmmStatus dmm_merge_checkpoints(const struct DmmCheckpoint *base,
                                     const struct DmmCheckpoint *const *models,
                                     size_t k,
                                     enum DmmScheme scheme,
                                     double lambda,
                                     double tau,
                                     uint8_t *outliers,
                                     struct DmmCheckpoint **out);

// Test accuracy of a checkpoint on a dataset file.
//
// # Safety
// `dataset_path` must be nul-terminated and `accuracy` writable.
enum DmmStatus dmm_evaluate(const struct DmmCheckpoint *ckpt,
                            const char *dataset_path,
                            double *accuracy);

// Runs the full pipeline from a TOML config. A non-null `out_dir`
// overrides the configured output directory.
//
// # Safety
// Both strings must be nul-terminated (or `out_dir` null).
enum DmmStatus dmm_run_pipeline(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMM_H */

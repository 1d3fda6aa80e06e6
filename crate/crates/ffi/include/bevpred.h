#ifndef BEVPRED_H
#define BEVPRED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BpStatus {
  BP_STATUS_OK = 0,
  BP_STATUS_NULL_ARGUMENT = 1,
  BP_STATUS_INVALID_ARGUMENT = 2,
  BP_STATUS_CONFIG = 3,
  BP_STATUS_DATA = 4,
  BP_STATUS_SHAPE = 5,
  BP_STATUS_NUMERIC = 6,
  BP_STATUS_OUT_OF_RANGE = 7,
  BP_STATUS_BUFFER_TOO_SMALL = 8,
  BP_STATUS_PANIC = 9,
} BpStatus;

typedef enum BpSplit {
  BP_SPLIT_TRAIN = 0,
  BP_SPLIT_EVAL = 1,
} BpSplit;

typedef struct BpCheckpoint BpCheckpoint;

typedef struct BpDataset BpDataset;

// Decoded instance-ID maps `[frames, height, width]`; 0 is background.
typedef struct BpInstanceMaps BpInstanceMaps;

// Scores on the largest configured ROI.
typedef struct BpMetrics {
  double iou;
  double vpq;
  double id_consistency;
} BpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *bp_last_error(void);

// Library version as a static NUL-terminated string.
const char *bp_version(void);

// Generates one split of the dataset described by a run configuration in
// TOML. A null or empty `config_toml` uses the defaults.
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` must be writable.
enum BpStatus bp_dataset_generate(const char *config_toml,
                                  enum BpSplit split,
                                  struct BpDataset **out);

// Opens a split directory written by `bevpred gen-data`.
//
// # Safety
// `dir` must be NUL-terminated; `out` must be writable.
enum BpStatus bp_dataset_open(const char *dir, struct BpDataset **out);

// # Safety
// `ds` must be a live dataset handle; `len` must be writable.
enum BpStatus bp_dataset_len(const struct BpDataset *ds, size_t *len);

// Copies the manifest hash (64 hex digits plus NUL) into `buf`.
//
// # Safety
// `ds` must be a live dataset handle; `buf` must hold `cap` bytes.
enum BpStatus bp_dataset_hash(const struct BpDataset *ds, char *buf, size_t cap);

// # Safety
// `ds` must be null or a handle not yet freed.
void bp_dataset_free(struct BpDataset *ds);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum BpStatus bp_checkpoint_open(const char *path, struct BpCheckpoint **out);

// Optimiser steps the checkpoint has taken.
//
// # Safety
// `ck` must be a live checkpoint handle; `step` must be writable.
enum BpStatus bp_checkpoint_step(const struct BpCheckpoint *ck, uint64_t *step);

// # Safety
// `ck` must be null or a handle not yet freed.
void bp_checkpoint_free(struct BpCheckpoint *ck);

// Runs the model on sample `index` and decodes instance maps with the
// checkpoint's inference settings.
//
// # Safety
// `ck` and `ds` must be live handles; `out` must be writable.
enum BpStatus bp_predict(const struct BpCheckpoint *ck,
                         const struct BpDataset *ds,
                         size_t index,
                         struct BpInstanceMaps **out);

// # Safety
// `maps` must be a live handle; the three outputs must be writable.
enum BpStatus bp_maps_dims(const struct BpInstanceMaps *maps,
                           size_t *frames,
                           size_t *height,
                           size_t *width);

// Copies the maps, frame-major then row-major, into `buf` of `len` ids.
//
// # Safety
// `maps` must be a live handle; `buf` must hold `len` values.
enum BpStatus bp_maps_copy(const struct BpInstanceMaps *maps, uint32_t *buf, size_t len);

// # Safety
// `maps` must be null or a handle not yet freed.
void bp_maps_free(struct BpInstanceMaps *maps);

// Evaluates a checkpoint on a dataset generated with the same world
// configuration.
//
// # Safety
// `ck` and `ds` must be live handles; `out` must be writable.
enum BpStatus bp_evaluate(const struct BpCheckpoint *ck,
                          const struct BpDataset *ds,
                          struct BpMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEVPRED_H */

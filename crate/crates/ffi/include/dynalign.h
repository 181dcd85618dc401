#ifndef DYNALIGN_H
#define DYNALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DaStatus {
  DA_STATUS_OK = 0,
  DA_STATUS_NULL_POINTER = 1,
  DA_STATUS_INVALID_ARGUMENT = 2,
  DA_STATUS_SHAPE = 3,
  DA_STATUS_NON_FINITE = 4,
  DA_STATUS_IO = 5,
  DA_STATUS_FORMAT = 6,
  DA_STATUS_BUFFER_TOO_SMALL = 7,
  DA_STATUS_INTERNAL = 8,
} DaStatus;

/**
 * Opaque few-shot dataset.
 */
typedef struct DaDataset DaDataset;

/**
 * Opaque trained or loaded model.
 */
typedef struct DaModel DaModel;

/**
 * Per-epoch training callback: `(epoch, mean loss, accuracy, lr, user)`.
 */
typedef void (*DaEpochCallback)(size_t, double, double, double, void*);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *da_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *da_last_error(void);

/**
 * Generates a synthetic dataset. `spec_json` may be null for the defaults;
 * missing fields take their default values.
 *
 * # Safety
 * `spec_json` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum DaStatus da_dataset_generate(const char *spec_json, struct DaDataset **out);

/**
 * Loads a dataset directory written by [`da_dataset_save`] or `gen-data`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum DaStatus da_dataset_load(const char *dir, struct DaDataset **out);

/**
 * # Safety
 * `dataset` must come from this library; `dir` must be NUL-terminated.
 */
enum DaStatus da_dataset_save(const struct DaDataset *dataset, const char *dir);

/**
 * # Safety
 * `dataset` must be null or a handle from this library not yet freed.
 */
void da_dataset_free(struct DaDataset *dataset);

/**
 * Trains a model from a JSON training config on the meta-train split.
 * `on_epoch` may be null.
 *
 * # Safety
 * Pointers must be valid as described for the other calls; `user` is
 * passed through to `on_epoch` untouched.
 */
enum DaStatus da_train(const char *config_json,
                       const struct DaDataset *dataset,
                       DaEpochCallback on_epoch,
                       void *user,
                       struct DaModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum DaStatus da_model_load(const char *dir, struct DaModel **out);

/**
 * # Safety
 * `model` must come from this library; `dir` must be NUL-terminated.
 */
enum DaStatus da_model_save(const struct DaModel *model, const char *dir);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void da_model_free(struct DaModel *model);

/**
 * Mean accuracy and 95% half-width over `episodes` meta-test episodes.
 *
 * # Safety
 * Handles must come from this library; `mean_acc` and `ci95` must be
 * writable.
 */
enum DaStatus da_evaluate(const struct DaModel *model,
                          const struct DaDataset *dataset,
                          size_t episodes,
                          size_t n_way,
                          size_t k_shot,
                          size_t n_query,
                          uint64_t seed,
                          double *mean_acc,
                          double *ci95);

/**
 * Initial sampling offsets of pair `pair` of the meta-test episode drawn
 * from `episode_seed` (one query per class, so `n_way * n_way` pairs; pair
 * `q * n_way + n` aligns query `q` with class `n`), as `18 * h * w` values (channel
 * `2p` is the row offset of grid point `p`, `2p + 1` the column offset).
 *
 * The required length is always written to `len`; when `capacity` is too
 * small nothing else is written and `BufferTooSmall` is returned, so a
 * first call with a null buffer queries the size.
 *
 * # Safety
 * Handles must come from this library; `out` must hold `capacity`
 * doubles (or be null when `capacity` is 0); `len` must be writable.
 */
enum DaStatus da_dump_offsets(const struct DaModel *model,
                              const struct DaDataset *dataset,
                              uint64_t episode_seed,
                              size_t n_way,
                              size_t k_shot,
                              size_t pair,
                              double *out,
                              size_t capacity,
                              size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNALIGN_H */

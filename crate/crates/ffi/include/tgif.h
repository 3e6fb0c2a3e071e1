#ifndef TGIF_H
#define TGIF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; 2–4 match the command-line exit codes.
 */
typedef enum TgifStatus {
  TGIF_STATUS_OK = 0,
  TGIF_STATUS_NULL_POINTER = 1,
  TGIF_STATUS_CONFIG = 2,
  TGIF_STATUS_DATA = 3,
  TGIF_STATUS_NUMERIC = 4,
  TGIF_STATUS_INVALID_UTF8 = 5,
  TGIF_STATUS_BUFFER_TOO_SMALL = 6,
  TGIF_STATUS_PANIC = 7,
} TgifStatus;

/**
 * Resolved training configuration.
 */
typedef struct TgifConfig TgifConfig;

/**
 * Model parameters, optimizer state and the config they were built from.
 */
typedef struct TgifModel TgifModel;

/**
 * Headline metrics of one evaluation.
 */
typedef struct TgifEvalSummary {
  double routing_accuracy;
  double task_accuracy;
  double mean_entropy;
  double routing_accuracy_existence;
  double routing_accuracy_detail;
  double task_accuracy_general;
} TgifEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tgif_version(void);

/**
 * Message for the last failed call on this thread, or null after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *tgif_last_error(void);

/**
 * Resolve a config from flat `key = value` text (null for the desk preset).
 *
 * # Safety
 * `text` is null or a NUL-terminated string; `out` is writable.
 */
enum TgifStatus tgif_config_new(const char *text, struct TgifConfig **out);

/**
 * Set one key; the config is revalidated and left unchanged on failure.
 *
 * # Safety
 * `cfg` comes from [`tgif_config_new`]; `key` and `value` are NUL-terminated.
 */
enum TgifStatus tgif_config_set(struct TgifConfig *cfg, const char *key, const char *value);

/**
 * Canonical text of the config into `buf` (NUL-terminated). `needed`, if
 * non-null, receives the required size including the NUL.
 *
 * # Safety
 * `buf` has room for `len` bytes or is null with `len == 0`.
 */
enum TgifStatus tgif_config_text(const struct TgifConfig *cfg,
                                 char *buf,
                                 size_t len,
                                 size_t *needed);

/**
 * # Safety
 * `cfg` is null or from [`tgif_config_new`] and not yet freed.
 */
void tgif_config_free(struct TgifConfig *cfg);

/**
 * Fresh model from a config; the router starts uniform.
 *
 * # Safety
 * `cfg` is a live config handle; `out` is writable.
 */
enum TgifStatus tgif_model_init(const struct TgifConfig *cfg, struct TgifModel **out);

/**
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum TgifStatus tgif_model_load(const char *path, struct TgifModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is NUL-terminated.
 */
enum TgifStatus tgif_model_save(const struct TgifModel *model, const char *path);

/**
 * Train in place: `stage` 1, 2, or 0 for stage 1 followed by stage 2.
 * On failure the model keeps its previous state.
 *
 * # Safety
 * `model` is a live handle.
 */
enum TgifStatus tgif_model_train(struct TgifModel *model, uint32_t stage);

/**
 * Number of encoder layers `L` routed over.
 *
 * # Safety
 * `model` is null or a live handle; null yields 0.
 */
size_t tgif_model_layers(const struct TgifModel *model);

/**
 * Width `D_t` of query embeddings; 0 for null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t tgif_model_text_dim(const struct TgifModel *model);

/**
 * Width `D_v` of image features; 0 for null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t tgif_model_image_dim(const struct TgifModel *model);

/**
 * Layer weights for `rows` queries. `f_text` is row-major `rows × text_dim`;
 * `f_image` (`rows × image_dim`) is required by multimodal routers and
 * ignored otherwise. Writes `rows × L` weights to `out`.
 *
 * # Safety
 * Buffers hold at least the stated number of doubles.
 */
enum TgifStatus tgif_model_route(const struct TgifModel *model,
                                 const double *f_text,
                                 size_t rows,
                                 const double *f_image,
                                 double *out,
                                 size_t out_len);

/**
 * Evaluate on a dataset directory written by `tgif gen-data`.
 *
 * # Safety
 * `model` is a live handle; `data_dir` is NUL-terminated; `out` is writable.
 */
enum TgifStatus tgif_model_eval(const struct TgifModel *model,
                                const char *data_dir,
                                struct TgifEvalSummary *out);

/**
 * # Safety
 * `model` is null or a live handle not yet freed.
 */
void tgif_model_free(struct TgifModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TGIF_H */

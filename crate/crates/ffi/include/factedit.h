/* C interface for the factedit rank-one model-editing library. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of an API call; mirrors the CLI exit codes.
 */
typedef enum FeStatus {
  FeStatus_Ok = 0,
  /**
   * Invalid arguments: null pointers, malformed JSON, missing fields.
   */
  FeStatus_Usage = 1,
  /**
   * Files or data that exist but violate the documented formats.
   */
  FeStatus_Data = 2,
  /**
   * Numerical failure inside the editing math.
   */
  FeStatus_Numeric = 3,
} FeStatus;

/**
 * Opaque handle: cached key second moments for one layer.
 */
typedef struct FeCovariance FeCovariance;

/**
 * Opaque handle: an encoder plus the vocabulary it was built against.
 */
typedef struct FeModel FeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fe_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *fe_version(void);

/**
 * Release a string produced by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned through one of the
 * `out_*_json` parameters, not yet freed.
 */
void fe_string_free(char *s);

/**
 * Load a weight container and its vocabulary file into a model handle.
 *
 * # Safety
 * `weights_path` and `vocab_path` must be valid NUL-terminated strings;
 * `out` must point to writable storage for one pointer.
 */
enum FeStatus fe_model_load(const char *weights_path, const char *vocab_path, struct FeModel **out);

/**
 * # Safety
 * `model` must be null or an unfreed handle from `fe_model_load`.
 */
void fe_model_free(struct FeModel *model);

/**
 * Save the model's weight container.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid NUL-terminated string.
 */
enum FeStatus fe_model_save(const struct FeModel *model, const char *path);

/**
 * Embedding dimension of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t fe_model_embed_dim(const struct FeModel *model);

/**
 * Encode `text` and write its EOS embedding into `out_embedding`, which
 * must hold `fe_model_embed_dim` doubles.
 *
 * # Safety
 * `model` must be a live handle, `text` a valid NUL-terminated string, and
 * `out_embedding` writable for `len` doubles.
 */
enum FeStatus fe_model_encode(const struct FeModel *model,
                              const char *text,
                              double *out_embedding,
                              uintptr_t len);

/**
 * Estimate key second moments for `layer` from a text corpus file.
 *
 * # Safety
 * `model` must be a live handle, `corpus_path` a valid NUL-terminated
 * string, `out` writable for one pointer.
 */
enum FeStatus fe_covariance_estimate(const struct FeModel *model,
                                     const char *corpus_path,
                                     uintptr_t layer,
                                     double epsilon_scale,
                                     bool include_special_positions,
                                     struct FeCovariance **out);

/**
 * Load a cached covariance container.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` writable for one
 * pointer.
 */
enum FeStatus fe_covariance_load(const char *path, struct FeCovariance **out);

/**
 * Save a covariance container.
 *
 * # Safety
 * `cov` must be a live handle; `path` a valid NUL-terminated string.
 */
enum FeStatus fe_covariance_save(const struct FeCovariance *cov, const char *path);

/**
 * # Safety
 * `cov` must be null or an unfreed covariance handle.
 */
void fe_covariance_free(struct FeCovariance *cov);

/**
 * Apply one rank-one edit in place. `request_json` is an edit request:
 * `{"edit_prompt", "subject", "source_text",
 *   "target": {"text": ...} | {"embedding": [...]},
 *   "layer", "key_templates": [...], "contrastive_texts": [...]}`.
 * `optimizer_json` may be null for defaults. On success the audit record
 * is returned through `out_audit_json`.
 *
 * # Safety
 * `model` must be a live handle with exclusive access, `cov` a live
 * covariance handle, `request_json` (and `optimizer_json` when non-null)
 * valid NUL-terminated strings, `out_audit_json` writable for one pointer.
 */
enum FeStatus fe_model_edit(struct FeModel *model,
                            const struct FeCovariance *cov,
                            const char *request_json,
                            const char *optimizer_json,
                            char **out_audit_json);

/**
 * Evaluate `edited` against `frozen` over a dataset file with the text
 * proxy scorer. `seeds`/`seed_count` may be null/0 for the default 0..24.
 * The metric report is returned through `out_report_json`.
 *
 * # Safety
 * `edited` and `frozen` must be live handles, `dataset_path` a valid
 * NUL-terminated string, `seeds` null or readable for `seed_count` values,
 * `out_report_json` writable for one pointer.
 */
enum FeStatus fe_model_eval(const struct FeModel *edited,
                            const struct FeModel *frozen,
                            const char *dataset_path,
                            const uint64_t *seeds,
                            uintptr_t seed_count,
                            char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

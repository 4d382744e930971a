/*
 * Copyright 2026 The e2d Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/* C interface to the e2d distillation pipeline.
 *
 * Every function returns an e2d_status. On failure the message is available
 * from e2d_last_error() on the calling thread until the next failing call.
 * Handles are opaque and must be released with the matching *_free function;
 * passing NULL to a *_free function is allowed.
 *
 * Functions that return text copy it into a caller buffer of `cap` bytes and
 * store the required size, including the terminating NUL, in `*len` when
 * `len` is not NULL. A buffer that is too small yields E2D_BUFFER_TOO_SMALL
 * and leaves the buffer untouched; call again with the reported size.
 */

#ifndef E2D_E2D_H
#define E2D_E2D_H

#include <stddef.h>

#if defined(_WIN32)
#define E2D_API __declspec(dllexport)
#else
#define E2D_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum e2d_status {
  E2D_OK = 0,
  E2D_INVALID_ARGUMENT = 1,
  E2D_CONFIG_ERROR = 2,
  E2D_STAGE_ERROR = 3,
  E2D_FINGERPRINT_MISMATCH = 4,
  E2D_IO_ERROR = 5,
  E2D_FORMAT_ERROR = 6,
  E2D_SHAPE_ERROR = 7,
  E2D_NON_FINITE = 8,
  E2D_BUFFER_TOO_SMALL = 9,
  E2D_INTERNAL_ERROR = 10
} e2d_status;

typedef struct e2d_config e2d_config;
typedef struct e2d_run e2d_run;
typedef struct e2d_model e2d_model;
typedef struct e2d_synth e2d_synth;

/* Optional artifact locations for a stage. NULL or "" selects the file
 * inside the run directory. `out` is the stage's main output and `metrics`
 * its CSV. */
typedef struct e2d_paths {
  const char* teacher;
  const char* synth;
  const char* out;
  const char* metrics;
} e2d_paths;

E2D_API const char* e2d_version(void);
E2D_API const char* e2d_last_error(void);
E2D_API const char* e2d_status_name(e2d_status status);
/* Process exit code for a status: 0 ok, 2 config, 4 fingerprint, 3 otherwise. */
E2D_API int e2d_exit_code(e2d_status status);

/* Configuration. Keys are "seed" or "section.key". */
E2D_API e2d_status e2d_config_default(e2d_config** out);
E2D_API e2d_status e2d_config_load(const char* path, e2d_config** out);
E2D_API e2d_status e2d_config_parse(const char* text, const char* source, e2d_config** out);
E2D_API void e2d_config_free(e2d_config* cfg);
E2D_API e2d_status e2d_config_set(e2d_config* cfg, const char* key, const char* value);
E2D_API e2d_status e2d_config_get(const e2d_config* cfg, const char* key, char* buf, size_t cap, size_t* len);
E2D_API e2d_status e2d_config_serialize(const e2d_config* cfg, char* buf, size_t cap, size_t* len);
E2D_API e2d_status e2d_config_validate(const e2d_config* cfg);

/* Runs live in <runs_root>/<run_id>/. The config is copied. A nonzero
 * `deterministic` forces one recover worker. */
E2D_API e2d_status e2d_run_open(const e2d_config* cfg, const char* runs_root, const char* run_id, int deterministic,
                                e2d_run** out);
E2D_API void e2d_run_free(e2d_run* run);
E2D_API e2d_status e2d_run_dir(const e2d_run* run, char* buf, size_t cap, size_t* len);
E2D_API e2d_status e2d_run_manifest(const e2d_run* run, char* buf, size_t cap, size_t* len);

/* Stages. `skipped` (may be NULL) is set to 1 when the stage was up to date. */
E2D_API e2d_status e2d_run_squeeze(e2d_run* run, const e2d_paths* paths, int* skipped);
E2D_API e2d_status e2d_run_recover(e2d_run* run, const e2d_paths* paths, int* skipped);
E2D_API e2d_status e2d_run_eval(e2d_run* run, const e2d_paths* paths, int* skipped);
/* Similarity of the finished set. `has_value` is 0 when no class has two
 * usable images. */
E2D_API e2d_status e2d_run_metrics(e2d_run* run, const e2d_paths* paths, double* global_cosine, int* has_value);
/* squeeze, recover and eval; `skipped` (may be NULL) receives a bit per
 * skipped stage in that order (1, 2, 4). */
E2D_API e2d_status e2d_run_pipeline(e2d_run* run, int* skipped);
/* Numeric field recorded by a finished stage, e.g. ("eval", "top1") or
 * ("recover", "stop_step"). */
E2D_API e2d_status e2d_run_stage_value(const e2d_run* run, const char* stage, const char* field, double* value);

/* Sweeps one axis (variant, k_fraction, epsilon, schedule). `values` is a
 * comma-separated list or NULL for the default grid. The comparison CSV is
 * written to <runs_root>/<run_id>/ablate_<axis>.csv; `failed` (may be NULL)
 * receives the number of values that failed. */
E2D_API e2d_status e2d_ablate(const e2d_config* cfg, const char* runs_root, const char* run_id, int deterministic,
                              const char* axis, const char* values, int* failed);

/* Checkpoints. */
E2D_API e2d_status e2d_model_load(const char* path, e2d_model** out);
E2D_API void e2d_model_free(e2d_model* model);
E2D_API e2d_status e2d_model_shape(const e2d_model* model, int* channels, int* height, int* width, int* classes);
/* Top-1 stored with the checkpoint; `has_value` is 0 when none was stored. */
E2D_API e2d_status e2d_model_stored_top1(const e2d_model* model, double* top1, int* has_value);
/* Eval-mode logits for `count` normalized NCHW images; `logits` holds
 * count * classes floats. */
E2D_API e2d_status e2d_model_logits(const e2d_model* model, const float* images, int count, float* logits);

/* Synthetic sets. */
E2D_API e2d_status e2d_synth_load(const char* path, e2d_synth** out);
E2D_API void e2d_synth_free(e2d_synth* synth);
E2D_API e2d_status e2d_synth_shape(const e2d_synth* synth, int* classes, int* ipc, int* channels, int* height,
                                   int* width);
/* Normalized pixels of every image, class-major; `cap` counts floats. */
E2D_API e2d_status e2d_synth_pixels(const e2d_synth* synth, float* buf, size_t cap);

#ifdef __cplusplus
}
#endif

#endif /* E2D_E2D_H */

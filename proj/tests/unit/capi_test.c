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

/* Exercises the shared library through its C header only. */

#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "e2d/e2d.h"

static int failures = 0;

#define EXPECT(cond)                                                   \
  do {                                                                 \
    if (!(cond)) {                                                     \
      ++failures;                                                      \
      fprintf(stderr, "%s:%d: EXPECT(%s) failed\n", __FILE__, __LINE__, #cond); \
    }                                                                  \
  } while (0)

#define EXPECT_OK(call) EXPECT((call) == E2D_OK)

static const char* kConfig =
    "seed = 5\n"
    "[dataset]\n"
    "train_images = " E2D_SOURCE_DIR "/data/mnist/train-images-idx3-ubyte.gz\n"
    "train_labels = " E2D_SOURCE_DIR "/data/mnist/train-labels-idx1-ubyte.gz\n"
    "test_images = " E2D_SOURCE_DIR "/data/mnist/t10k-images-idx3-ubyte.gz\n"
    "test_labels = " E2D_SOURCE_DIR "/data/mnist/t10k-labels-idx1-ubyte.gz\n"
    "[teacher]\nwidth = 4\ndepth = 1\nepochs = 1\nbatch_size = 128\nlr = 0.01\n"
    "[recover]\nipc = 2\niterations = 6\nexplore_iterations = 4\n"
    "[eval]\nepochs = 1\nbatch_size = 2\nlr = 0.01\nflip_prob = 0\n"
    "[metrics]\nstride = 3\nprobe_crops = 1\n";

static void test_config(void) {
  e2d_config* cfg = NULL;
  EXPECT_OK(e2d_config_parse(kConfig, "capi.cfg", &cfg));

  char buf[64];
  size_t len = 0;
  EXPECT_OK(e2d_config_get(cfg, "recover.ipc", buf, sizeof buf, &len));
  EXPECT(strcmp(buf, "2") == 0);
  EXPECT(len == 2);
  EXPECT_OK(e2d_config_set(cfg, "recover.epsilon", "0.25"));
  EXPECT_OK(e2d_config_get(cfg, "recover.epsilon", buf, sizeof buf, NULL));
  EXPECT(strcmp(buf, "0.25") == 0);

  EXPECT(e2d_config_get(cfg, "dataset.train_images", buf, 4, &len) == E2D_BUFFER_TOO_SMALL);
  EXPECT(len > 4);

  EXPECT(e2d_config_set(cfg, "recover.epsilom", "1") == E2D_CONFIG_ERROR);
  EXPECT(strstr(e2d_last_error(), "recover.epsilom") != NULL);
  EXPECT(e2d_exit_code(E2D_CONFIG_ERROR) == 2);
  EXPECT(e2d_config_set(cfg, "recover.ipc", "many") == E2D_CONFIG_ERROR);

  size_t need = 0;
  EXPECT(e2d_config_serialize(cfg, NULL, 0, &need) == E2D_BUFFER_TOO_SMALL);
  char* text = malloc(need);
  EXPECT_OK(e2d_config_serialize(cfg, text, need, NULL));
  e2d_config* back = NULL;
  EXPECT_OK(e2d_config_parse(text, "round-trip", &back));
  char* text2 = malloc(need);
  EXPECT_OK(e2d_config_serialize(back, text2, need, NULL));
  EXPECT(strcmp(text, text2) == 0);
  free(text);
  free(text2);
  e2d_config_free(back);

  EXPECT_OK(e2d_config_set(cfg, "recover.explore_iterations", "6"));
  EXPECT(e2d_config_validate(cfg) == E2D_CONFIG_ERROR);
  EXPECT(strstr(e2d_last_error(), "recover.iterations") != NULL);
  e2d_config_free(cfg);

  e2d_config* bad = NULL;
  EXPECT(e2d_config_parse("[teacher]\nwidht = 2\n", "typo.cfg", &bad) == E2D_CONFIG_ERROR);
  EXPECT(bad == NULL);
  EXPECT(strstr(e2d_last_error(), "typo.cfg") != NULL);
  EXPECT(e2d_config_load("/nonexistent/run.cfg", &bad) == E2D_CONFIG_ERROR);
}

static void test_arguments(void) {
  EXPECT(e2d_config_parse(NULL, NULL, NULL) == E2D_INVALID_ARGUMENT);
  EXPECT(e2d_run_pipeline(NULL, NULL) == E2D_INVALID_ARGUMENT);
  EXPECT(strstr(e2d_last_error(), "run") != NULL);
  EXPECT(e2d_model_load(NULL, NULL) == E2D_INVALID_ARGUMENT);
  e2d_config_free(NULL);
  e2d_run_free(NULL);
  e2d_model_free(NULL);
  e2d_synth_free(NULL);
  EXPECT(strlen(e2d_version()) > 0);
  EXPECT(strcmp(e2d_status_name(E2D_FINGERPRINT_MISMATCH), "fingerprint mismatch") == 0);
  EXPECT(e2d_exit_code(E2D_OK) == 0);
  EXPECT(e2d_exit_code(E2D_STAGE_ERROR) == 3);
  EXPECT(e2d_exit_code(E2D_IO_ERROR) == 3);
  EXPECT(e2d_exit_code(E2D_FINGERPRINT_MISMATCH) == 4);
}

static void test_run(const char* root) {
  e2d_config* cfg = NULL;
  EXPECT_OK(e2d_config_parse(kConfig, "capi.cfg", &cfg));
  e2d_run* run = NULL;
  EXPECT_OK(e2d_run_open(cfg, root, "capi", 1, &run));
  EXPECT(e2d_run_open(cfg, root, "../escape", 1, &run) == E2D_CONFIG_ERROR);

  int skipped = -1;
  EXPECT_OK(e2d_run_pipeline(run, &skipped));
  EXPECT(skipped == 0);
  EXPECT_OK(e2d_run_pipeline(run, &skipped));
  EXPECT(skipped == 7);

  double v = -1.0;
  EXPECT_OK(e2d_run_stage_value(run, "eval", "top1", &v));
  EXPECT(v >= 0.0 && v <= 1.0);
  EXPECT_OK(e2d_run_stage_value(run, "recover", "stop_step", &v));
  EXPECT(v >= 4.0 && v <= 6.0);
  EXPECT(e2d_run_stage_value(run, "recover", "no_such_field", &v) == E2D_INVALID_ARGUMENT);

  double cosine = 0.0;
  int has = 0;
  EXPECT_OK(e2d_run_metrics(run, NULL, &cosine, &has));
  EXPECT(has == 1);
  EXPECT(cosine >= -1.0 && cosine <= 1.0);

  char dir[512];
  EXPECT_OK(e2d_run_dir(run, dir, sizeof dir, NULL));
  size_t mlen = 0;
  EXPECT(e2d_run_manifest(run, NULL, 0, &mlen) == E2D_BUFFER_TOO_SMALL);
  EXPECT(mlen > 100);

  char path[600];
  snprintf(path, sizeof path, "%s/teacher.e2dc", dir);
  e2d_model* model = NULL;
  EXPECT_OK(e2d_model_load(path, &model));
  int c = 0, h = 0, w = 0, classes = 0;
  EXPECT_OK(e2d_model_shape(model, &c, &h, &w, &classes));
  EXPECT(c == 1 && h == 28 && w == 28 && classes == 10);
  double top1 = 0.0;
  EXPECT_OK(e2d_model_stored_top1(model, &top1, &has));
  EXPECT(has == 1);

  snprintf(path, sizeof path, "%s/synth.e2ds", dir);
  e2d_synth* synth = NULL;
  EXPECT_OK(e2d_synth_load(path, &synth));
  int sl = 0, ipc = 0;
  EXPECT_OK(e2d_synth_shape(synth, &sl, &ipc, &c, &h, &w));
  EXPECT(sl == 10 && ipc == 2 && c == 1 && h == 28 && w == 28);
  const size_t n = (size_t)sl * ipc * c * h * w;
  float* pixels = malloc(n * sizeof(float));
  EXPECT(e2d_synth_pixels(synth, pixels, n - 1) == E2D_BUFFER_TOO_SMALL);
  EXPECT_OK(e2d_synth_pixels(synth, pixels, n));
  float logits[20 * 10];
  EXPECT_OK(e2d_model_logits(model, pixels, sl * ipc, logits));
  int finite = 1;
  for (int i = 0; i < 200; ++i) finite = finite && isfinite(logits[i]);
  EXPECT(finite);
  free(pixels);
  e2d_synth_free(synth);
  e2d_model_free(model);

  /* Flip one byte of the recorded teacher: recover must refuse. */
  snprintf(path, sizeof path, "%s/teacher.e2dc", dir);
  FILE* f = fopen(path, "r+b");
  EXPECT(f != NULL);
  if (f != NULL) {
    fseek(f, 64, SEEK_SET);
    int byte = fgetc(f);
    fseek(f, 64, SEEK_SET);
    fputc(byte ^ 0xff, f);
    fclose(f);
  }
  e2d_run_free(run);
  EXPECT_OK(e2d_config_set(cfg, "recover.lr", "0.01"));
  EXPECT_OK(e2d_run_open(cfg, root, "capi", 1, &run));
  const e2d_status s = e2d_run_recover(run, NULL, &skipped);
  EXPECT(s == E2D_FINGERPRINT_MISMATCH);
  EXPECT(e2d_exit_code(s) == 4);
  EXPECT(strstr(e2d_last_error(), "sha256 mismatch") != NULL);
  e2d_run_free(run);

  int failed = -1;
  EXPECT(e2d_ablate(cfg, root, "capi", 1, "width", NULL, &failed) == E2D_CONFIG_ERROR);
  e2d_config_free(cfg);
}

int main(int argc, char** argv) {
  const char* root = argc > 1 ? argv[1] : "capi_runs";
  test_arguments();
  test_config();
  test_run(root);
  if (failures > 0) {
    fprintf(stderr, "%d expectation(s) failed\n", failures);
    return 1;
  }
  printf("capi_test: all expectations passed\n");
  return 0;
}

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

#include "e2d/e2d.h"

#include <cstring>
#include <exception>
#include <memory>
#include <sstream>
#include <string>

#include <spdlog/cfg/env.h>

#include "common/error.hpp"
#include "diffnet/checkpoint.hpp"
#include "pipeline/config.hpp"
#include "pipeline/run.hpp"
#include "recover/synthetic.hpp"

struct e2d_config {
  e2d::pipeline::RunConfig cfg;
};

struct e2d_run {
  e2d::pipeline::Run run;
};

struct e2d_model {
  e2d::diffnet::Checkpoint ckpt;
};

struct e2d_synth {
  e2d::recover::SyntheticSet set;
};

namespace {

thread_local std::string g_last_error;

// SPDLOG_LEVEL=warn (or off) quiets stage logging.
const bool g_env_levels = (spdlog::cfg::load_env_levels(), true);

e2d_status status_of(e2d::ErrorKind kind) {
  switch (kind) {
    case e2d::ErrorKind::InvalidArgument:
      return E2D_INVALID_ARGUMENT;
    case e2d::ErrorKind::Shape:
      return E2D_SHAPE_ERROR;
    case e2d::ErrorKind::NonFinite:
      return E2D_NON_FINITE;
    case e2d::ErrorKind::Io:
      return E2D_IO_ERROR;
    case e2d::ErrorKind::Format:
      return E2D_FORMAT_ERROR;
    case e2d::ErrorKind::Config:
      return E2D_CONFIG_ERROR;
    case e2d::ErrorKind::Fingerprint:
      return E2D_FINGERPRINT_MISMATCH;
    case e2d::ErrorKind::Stage:
      return E2D_STAGE_ERROR;
  }
  return E2D_INTERNAL_ERROR;
}

e2d_status set_error(e2d_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

template <typename F>
e2d_status guarded(F&& f) {
  try {
    return f();
  } catch (const e2d::Error& e) {
    return set_error(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(E2D_INTERNAL_ERROR, "out of memory");
  } catch (const std::exception& e) {
    return set_error(E2D_INTERNAL_ERROR, e.what());
  }
}

e2d_status null_argument(const char* name) { return set_error(E2D_INVALID_ARGUMENT, std::string(name) + " is NULL"); }

e2d_status copy_out(const std::string& text, char* buf, size_t cap, size_t* len) {
  if (len != nullptr) *len = text.size() + 1;
  if (buf == nullptr || cap < text.size() + 1) {
    return set_error(E2D_BUFFER_TOO_SMALL, "buffer of " + std::to_string(cap) + " bytes is too small; " +
                                               std::to_string(text.size() + 1) + " needed");
  }
  std::memcpy(buf, text.c_str(), text.size() + 1);
  return E2D_OK;
}

std::string str(const char* s) { return s == nullptr ? std::string() : std::string(s); }

e2d::pipeline::StagePaths stage_paths(const e2d_paths* p) {
  if (p == nullptr) return {};
  return {str(p->teacher), str(p->synth), str(p->out), str(p->metrics)};
}

} // namespace

extern "C" {

const char* e2d_version(void) { return E2D_VERSION; }

const char* e2d_last_error(void) { return g_last_error.c_str(); }

const char* e2d_status_name(e2d_status status) {
  switch (status) {
    case E2D_OK:
      return "ok";
    case E2D_INVALID_ARGUMENT:
      return "invalid argument";
    case E2D_CONFIG_ERROR:
      return "config error";
    case E2D_STAGE_ERROR:
      return "stage failure";
    case E2D_FINGERPRINT_MISMATCH:
      return "fingerprint mismatch";
    case E2D_IO_ERROR:
      return "i/o error";
    case E2D_FORMAT_ERROR:
      return "format error";
    case E2D_SHAPE_ERROR:
      return "shape error";
    case E2D_NON_FINITE:
      return "non-finite value";
    case E2D_BUFFER_TOO_SMALL:
      return "buffer too small";
    case E2D_INTERNAL_ERROR:
      return "internal error";
  }
  return "unknown status";
}

int e2d_exit_code(e2d_status status) {
  switch (status) {
    case E2D_OK:
      return e2d::pipeline::kExitOk;
    case E2D_CONFIG_ERROR:
    case E2D_INVALID_ARGUMENT:
      return e2d::pipeline::kExitConfig;
    case E2D_FINGERPRINT_MISMATCH:
      return e2d::pipeline::kExitFingerprint;
    default:
      return e2d::pipeline::kExitStage;
  }
}

e2d_status e2d_config_default(e2d_config** out) {
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    *out = new e2d_config{};
    return E2D_OK;
  });
}

e2d_status e2d_config_load(const char* path, e2d_config** out) {
  if (path == nullptr) return null_argument("path");
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    *out = new e2d_config{e2d::pipeline::load_config(path)};
    return E2D_OK;
  });
}

e2d_status e2d_config_parse(const char* text, const char* source, e2d_config** out) {
  if (text == nullptr) return null_argument("text");
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    *out = new e2d_config{e2d::pipeline::parse_config(text, source == nullptr ? "config" : source)};
    return E2D_OK;
  });
}

void e2d_config_free(e2d_config* cfg) { delete cfg; }

e2d_status e2d_config_set(e2d_config* cfg, const char* key, const char* value) {
  if (cfg == nullptr) return null_argument("cfg");
  if (key == nullptr) return null_argument("key");
  if (value == nullptr) return null_argument("value");
  return guarded([&] {
    e2d::pipeline::set_key(cfg->cfg, key, value);
    return E2D_OK;
  });
}

e2d_status e2d_config_get(const e2d_config* cfg, const char* key, char* buf, size_t cap, size_t* len) {
  if (cfg == nullptr) return null_argument("cfg");
  if (key == nullptr) return null_argument("key");
  return guarded([&] { return copy_out(e2d::pipeline::get_key(cfg->cfg, key), buf, cap, len); });
}

e2d_status e2d_config_serialize(const e2d_config* cfg, char* buf, size_t cap, size_t* len) {
  if (cfg == nullptr) return null_argument("cfg");
  return guarded([&] { return copy_out(e2d::pipeline::serialize_config(cfg->cfg), buf, cap, len); });
}

e2d_status e2d_config_validate(const e2d_config* cfg) {
  if (cfg == nullptr) return null_argument("cfg");
  return guarded([&] {
    e2d::pipeline::validate(cfg->cfg);
    return E2D_OK;
  });
}

e2d_status e2d_run_open(const e2d_config* cfg, const char* runs_root, const char* run_id, int deterministic,
                        e2d_run** out) {
  if (cfg == nullptr) return null_argument("cfg");
  if (run_id == nullptr) return null_argument("run_id");
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    e2d::pipeline::RunOptions opts;
    if (runs_root != nullptr && *runs_root != '\0') opts.runs_root = runs_root;
    opts.run_id = run_id;
    opts.deterministic = deterministic != 0;
    *out = new e2d_run{e2d::pipeline::Run(cfg->cfg, opts)};
    return E2D_OK;
  });
}

void e2d_run_free(e2d_run* run) { delete run; }

e2d_status e2d_run_dir(const e2d_run* run, char* buf, size_t cap, size_t* len) {
  if (run == nullptr) return null_argument("run");
  return guarded([&] { return copy_out(run->run.dir().string(), buf, cap, len); });
}

e2d_status e2d_run_manifest(const e2d_run* run, char* buf, size_t cap, size_t* len) {
  if (run == nullptr) return null_argument("run");
  return guarded([&] { return copy_out(run->run.manifest().json().dump(2), buf, cap, len); });
}

#define E2D_STAGE(fn, method)                                                  \
  e2d_status fn(e2d_run* run, const e2d_paths* paths, int* skipped) {          \
    if (run == nullptr) return null_argument("run");                           \
    return guarded([&] {                                                       \
      const auto outcome = run->run.method(stage_paths(paths));                \
      if (skipped != nullptr) *skipped = outcome.skipped ? 1 : 0;              \
      return E2D_OK;                                                           \
    });                                                                        \
  }

E2D_STAGE(e2d_run_squeeze, squeeze)
E2D_STAGE(e2d_run_recover, recover)
E2D_STAGE(e2d_run_eval, eval)

#undef E2D_STAGE

e2d_status e2d_run_metrics(e2d_run* run, const e2d_paths* paths, double* global_cosine, int* has_value) {
  if (run == nullptr) return null_argument("run");
  return guarded([&] {
    const auto report = run->run.metrics(stage_paths(paths));
    if (has_value != nullptr) *has_value = report.global_mean ? 1 : 0;
    if (global_cosine != nullptr) *global_cosine = report.global_mean.value_or(0.0);
    return E2D_OK;
  });
}

e2d_status e2d_run_pipeline(e2d_run* run, int* skipped) {
  if (run == nullptr) return null_argument("run");
  return guarded([&] {
    const auto outcomes = run->run.pipeline();
    int mask = 0;
    for (std::size_t i = 0; i < outcomes.size(); ++i) mask |= outcomes[i].skipped ? (1 << i) : 0;
    if (skipped != nullptr) *skipped = mask;
    return E2D_OK;
  });
}

e2d_status e2d_run_stage_value(const e2d_run* run, const char* stage, const char* field, double* value) {
  if (run == nullptr) return null_argument("run");
  if (stage == nullptr) return null_argument("stage");
  if (field == nullptr) return null_argument("field");
  if (value == nullptr) return null_argument("value");
  return guarded([&] {
    const auto* st = run->run.manifest().find_stage(stage);
    if (st == nullptr || !st->contains(field) || !(*st)[field].is_number()) {
      return set_error(E2D_INVALID_ARGUMENT, std::string("stage '") + stage + "' has no numeric field '" + field + "'");
    }
    *value = (*st)[field].get<double>();
    return E2D_OK;
  });
}

e2d_status e2d_ablate(const e2d_config* cfg, const char* runs_root, const char* run_id, int deterministic,
                      const char* axis, const char* values, int* failed) {
  if (cfg == nullptr) return null_argument("cfg");
  if (run_id == nullptr) return null_argument("run_id");
  if (axis == nullptr) return null_argument("axis");
  return guarded([&] {
    e2d::pipeline::RunOptions opts;
    if (runs_root != nullptr && *runs_root != '\0') opts.runs_root = runs_root;
    opts.run_id = run_id;
    opts.deterministic = deterministic != 0;
    std::vector<std::string> list;
    std::stringstream ss(str(values));
    for (std::string item; std::getline(ss, item, ',');) {
      const auto b = item.find_first_not_of(" \t");
      if (b != std::string::npos) list.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
    }
    const auto rows = e2d::pipeline::ablate(cfg->cfg, opts, axis, list);
    int n = 0;
    for (const auto& r : rows) n += r.status == "ok" ? 0 : 1;
    if (failed != nullptr) *failed = n;
    return E2D_OK;
  });
}

e2d_status e2d_model_load(const char* path, e2d_model** out) {
  if (path == nullptr) return null_argument("path");
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    *out = new e2d_model{e2d::diffnet::load_checkpoint(path)};
    return E2D_OK;
  });
}

void e2d_model_free(e2d_model* model) { delete model; }

e2d_status e2d_model_shape(const e2d_model* model, int* channels, int* height, int* width, int* classes) {
  if (model == nullptr) return null_argument("model");
  return guarded([&] {
    const auto& in = model->ckpt.model.input_shape();
    if (channels != nullptr) *channels = in.channels;
    if (height != nullptr) *height = in.height;
    if (width != nullptr) *width = in.width;
    if (classes != nullptr) *classes = model->ckpt.model.num_classes();
    return E2D_OK;
  });
}

e2d_status e2d_model_stored_top1(const e2d_model* model, double* top1, int* has_value) {
  if (model == nullptr) return null_argument("model");
  if (has_value != nullptr) *has_value = model->ckpt.top1 ? 1 : 0;
  if (top1 != nullptr) *top1 = model->ckpt.top1.value_or(0.0);
  return E2D_OK;
}

e2d_status e2d_model_logits(const e2d_model* model, const float* images, int count, float* logits) {
  if (model == nullptr) return null_argument("model");
  if (images == nullptr) return null_argument("images");
  if (logits == nullptr) return null_argument("logits");
  if (count < 1) return set_error(E2D_INVALID_ARGUMENT, "count must be >= 1");
  return guarded([&] {
    const auto& in = model->ckpt.model.input_shape();
    e2d::diffnet::Tensor batch({count, in.channels, in.height, in.width});
    std::memcpy(batch.values().data(), images, batch.size() * sizeof(float));
    const e2d::diffnet::Tensor out = model->ckpt.model.predict(batch);
    std::memcpy(logits, out.values().data(), out.size() * sizeof(float));
    return E2D_OK;
  });
}

e2d_status e2d_synth_load(const char* path, e2d_synth** out) {
  if (path == nullptr) return null_argument("path");
  if (out == nullptr) return null_argument("out");
  return guarded([&] {
    *out = new e2d_synth{e2d::recover::load_synth(path)};
    return E2D_OK;
  });
}

void e2d_synth_free(e2d_synth* synth) { delete synth; }

e2d_status e2d_synth_shape(const e2d_synth* synth, int* classes, int* ipc, int* channels, int* height, int* width) {
  if (synth == nullptr) return null_argument("synth");
  const auto& s = synth->set;
  if (classes != nullptr) *classes = s.num_classes;
  if (ipc != nullptr) *ipc = s.ipc;
  if (channels != nullptr) *channels = s.channels;
  if (height != nullptr) *height = s.height;
  if (width != nullptr) *width = s.width;
  return E2D_OK;
}

e2d_status e2d_synth_pixels(const e2d_synth* synth, float* buf, size_t cap) {
  if (synth == nullptr) return null_argument("synth");
  const auto& s = synth->set;
  const size_t per = static_cast<size_t>(s.channels) * s.height * s.width;
  const size_t need = per * s.count();
  if (buf == nullptr || cap < need) {
    return set_error(E2D_BUFFER_TOO_SMALL, std::to_string(need) + " floats needed");
  }
  for (size_t k = 0; k < s.count(); ++k) std::memcpy(buf + k * per, s.images[k].values().data(), per * sizeof(float));
  return E2D_OK;
}

} // extern "C"

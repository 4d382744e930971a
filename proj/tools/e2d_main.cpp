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

// Command-line front end. Talks to the library only through the C API.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "e2d/e2d.h"

namespace {

struct Options {
  std::string config;
  std::string run_id;
  std::string runs_root = "runs";
  std::vector<std::string> overrides;
  long long seed = -1;
  bool deterministic = false;
  std::string teacher, synth, out, metrics;
  std::string axis, values;
};

int report(e2d_status status) {
  if (status != E2D_OK) std::fprintf(stderr, "e2d: %s: %s\n", e2d_status_name(status), e2d_last_error());
  return e2d_exit_code(status);
}

class ConfigHandle {
 public:
  ~ConfigHandle() { e2d_config_free(cfg_); }
  e2d_config* get() const { return cfg_; }

  e2d_status load(const Options& o) {
    e2d_status s = e2d_config_load(o.config.c_str(), &cfg_);
    if (s != E2D_OK) return s;
    if (o.seed >= 0) {
      s = e2d_config_set(cfg_, "seed", std::to_string(o.seed).c_str());
      if (s != E2D_OK) return s;
    }
    for (const std::string& kv : o.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "e2d: --set expects key=value, got '%s'\n", kv.c_str());
        return E2D_CONFIG_ERROR;
      }
      s = e2d_config_set(cfg_, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
      if (s != E2D_OK) return s;
    }
    return e2d_config_validate(cfg_);
  }

 private:
  e2d_config* cfg_ = nullptr;
};

std::string default_run_id(const Options& o) {
  return o.run_id.empty() ? std::filesystem::path(o.config).stem().string() : o.run_id;
}

int with_run(const Options& o, int (*body)(e2d_run*, const Options&)) {
  ConfigHandle cfg;
  if (e2d_status s = cfg.load(o); s != E2D_OK) return report(s);
  e2d_run* run = nullptr;
  if (e2d_status s = e2d_run_open(cfg.get(), o.runs_root.c_str(), default_run_id(o).c_str(), o.deterministic, &run);
      s != E2D_OK) {
    return report(s);
  }
  const int code = body(run, o);
  e2d_run_free(run);
  return code;
}

e2d_paths paths_of(const Options& o) {
  return {o.teacher.c_str(), o.synth.c_str(), o.out.c_str(), o.metrics.c_str()};
}

int stage_result(const char* stage, e2d_status s, int skipped) {
  if (s == E2D_OK) std::printf("%s: %s\n", stage, skipped ? "up to date" : "done");
  return report(s);
}

} // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Exploration-exploitation dataset distillation"};
  app.set_version_flag("--version", std::string(e2d_version()));
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config, "Run config file (INI)")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Override the master seed")->check(CLI::NonNegativeNumber);
  app.add_option("--run-id", o.run_id, "Run directory name (default: config file stem)");
  app.add_option("--runs-root", o.runs_root, "Parent of run directories")->capture_default_str();
  app.add_flag("--deterministic", o.deterministic, "Single recover worker for bit-exact reference runs");
  app.add_option("--set", o.overrides, "Override a config key, e.g. --set recover.epsilon=0.25");

  auto* squeeze = app.add_subcommand("squeeze", "Train the teacher");
  squeeze->add_option("--out", o.out, "Teacher checkpoint path");

  auto* recover = app.add_subcommand("recover", "Synthesize the distilled set");
  recover->add_option("--teacher", o.teacher, "Teacher checkpoint");
  recover->add_option("--out", o.out, "Synthetic set path");
  recover->add_option("--metrics", o.metrics, "Per-step metric CSV path");

  auto* eval = app.add_subcommand("eval", "Train and test a student on the distilled set");
  eval->add_option("--teacher", o.teacher, "Teacher checkpoint");
  eval->add_option("--synth", o.synth, "Synthetic set");
  eval->add_option("--out", o.out, "Student checkpoint path");
  eval->add_option("--metrics", o.metrics, "Eval CSV path");

  auto* metrics = app.add_subcommand("metrics", "Feature similarity of a distilled set");
  metrics->add_option("--teacher", o.teacher, "Teacher checkpoint");
  metrics->add_option("--synth", o.synth, "Synthetic set");
  metrics->add_option("--out", o.out, "Similarity CSV path");

  auto* pipeline = app.add_subcommand("pipeline", "squeeze, recover and eval in one run directory");

  auto* ablate = app.add_subcommand("ablate", "Sweep one axis with a shared teacher and initialization");
  ablate->add_option("--axis", o.axis, "variant | k_fraction | epsilon | schedule")
      ->required()
      ->check(CLI::IsMember({"variant", "k_fraction", "epsilon", "schedule"}));
  ablate->add_option("--values", o.values, "Comma-separated values (default grid when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (squeeze->parsed()) {
    return with_run(o, [](e2d_run* run, const Options& opts) {
      const e2d_paths p = paths_of(opts);
      int skipped = 0;
      return stage_result("squeeze", e2d_run_squeeze(run, &p, &skipped), skipped);
    });
  }
  if (recover->parsed()) {
    return with_run(o, [](e2d_run* run, const Options& opts) {
      const e2d_paths p = paths_of(opts);
      int skipped = 0;
      return stage_result("recover", e2d_run_recover(run, &p, &skipped), skipped);
    });
  }
  if (eval->parsed()) {
    return with_run(o, [](e2d_run* run, const Options& opts) {
      const e2d_paths p = paths_of(opts);
      int skipped = 0;
      const e2d_status s = e2d_run_eval(run, &p, &skipped);
      double top1 = 0.0;
      if (s == E2D_OK && e2d_run_stage_value(run, "eval", "top1", &top1) == E2D_OK) {
        std::printf("top1: %.4f\n", top1);
      }
      return stage_result("eval", s, skipped);
    });
  }
  if (metrics->parsed()) {
    return with_run(o, [](e2d_run* run, const Options& opts) {
      const e2d_paths p = paths_of(opts);
      double cosine = 0.0;
      int has = 0;
      const e2d_status s = e2d_run_metrics(run, &p, &cosine, &has);
      if (s == E2D_OK) {
        if (has) {
          std::printf("global mean cosine: %.6f\n", cosine);
        } else {
          std::printf("global mean cosine: n/a\n");
        }
      }
      return report(s);
    });
  }
  if (pipeline->parsed()) {
    return with_run(o, [](e2d_run* run, const Options&) {
      int skipped = 0;
      const e2d_status s = e2d_run_pipeline(run, &skipped);
      if (s == E2D_OK) {
        const char* names[] = {"squeeze", "recover", "eval"};
        for (int i = 0; i < 3; ++i) std::printf("%s: %s\n", names[i], (skipped >> i) & 1 ? "up to date" : "done");
        double top1 = 0.0;
        if (e2d_run_stage_value(run, "eval", "top1", &top1) == E2D_OK) std::printf("top1: %.4f\n", top1);
      }
      return report(s);
    });
  }
  if (ablate->parsed()) {
    ConfigHandle cfg;
    if (e2d_status s = cfg.load(o); s != E2D_OK) return report(s);
    int failed = 0;
    const std::string run_id = default_run_id(o);
    const e2d_status s = e2d_ablate(cfg.get(), o.runs_root.c_str(), run_id.c_str(), o.deterministic, o.axis.c_str(),
                                    o.values.empty() ? nullptr : o.values.c_str(), &failed);
    if (s != E2D_OK) return report(s);
    std::printf("%s/%s/ablate_%s.csv\n", o.runs_root.c_str(), run_id.c_str(), o.axis.c_str());
    if (failed > 0) {
      std::fprintf(stderr, "e2d: %d value(s) failed; see the status column\n", failed);
      return e2d_exit_code(E2D_STAGE_ERROR);
    }
    return 0;
  }
  return 2;
}

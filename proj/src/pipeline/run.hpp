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

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "common/error.hpp"
#include "dataio/dataset.hpp"
#include "metrics/similarity.hpp"
#include "pipeline/config.hpp"
#include "pipeline/manifest.hpp"

namespace e2d::pipeline {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;
inline constexpr int kExitFingerprint = 4;

int exit_code(ErrorKind kind);

struct RunOptions {
  std::string runs_root = "runs";
  std::string run_id = "run";
  bool deterministic = false;
};

/// Explicit artifact locations; empty fields fall back to the run directory.
struct StagePaths {
  std::string teacher;
  std::string synth;
  std::string out;
  std::string metrics;
};

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  double wall_ms = 0.0;
};

// File names inside runs/<run_id>/.
inline constexpr const char* kTeacherFile = "teacher.e2dc";
inline constexpr const char* kSynthFile = "synth.e2ds";
inline constexpr const char* kStudentFile = "student.e2dc";
inline constexpr const char* kRecoverCsv = "recover.csv";
inline constexpr const char* kEvalCsv = "eval.csv";
inline constexpr const char* kSimilarityCsv = "similarity.csv";
inline constexpr const char* kProbeCsv = "probe.csv";
inline constexpr const char* kFinalSimilarityCsv = "similarity_final.csv";
inline constexpr const char* kManifestFile = "manifest.json";

/// One run directory. Stages skip when the manifest records the same stage
/// fingerprint and every output still hashes to its recorded value; a
/// recorded input or output whose bytes changed raises ErrorKind::Fingerprint.
class Run {
 public:
  Run(RunConfig cfg, RunOptions opts);

  const std::filesystem::path& dir() const noexcept { return dir_; }
  const RunConfig& config() const noexcept { return cfg_; }
  const Manifest& manifest() const noexcept { return manifest_; }
  const std::string& run_id() const noexcept { return opts_.run_id; }

  StageOutcome squeeze(const StagePaths& paths = {});
  StageOutcome recover(const StagePaths& paths = {});
  StageOutcome eval(const StagePaths& paths = {});
  /// Similarity report of a finished synthetic set, written as similarity CSV.
  metrics::SimilarityReport metrics(const StagePaths& paths = {});
  /// squeeze, recover, eval in order.
  std::vector<StageOutcome> pipeline();

 private:
  struct Data {
    dataio::RawDataset train;
    dataio::RawDataset test;
    std::string train_sha256;
    std::string test_sha256;
  };
  const Data& data();
  std::filesystem::path resolve(const std::string& given, const char* file) const;
  std::filesystem::path input(const std::string& given, const char* name, const char* file) const;
  bool can_skip(const std::string& stage, const std::string& fingerprint,
                const std::vector<std::pair<std::string, std::filesystem::path>>& outputs) const;
  template <typename Body>
  StageOutcome run_stage(const std::string& stage, const Body& body);
  void record_common();

  RunConfig cfg_;
  RunOptions opts_;
  std::filesystem::path dir_;
  Manifest manifest_;
  std::optional<Data> data_;
};

std::vector<std::string> ablation_axes();
/// Default sweep grid of an axis.
std::vector<std::string> default_axis_values(const std::string& axis);
/// Applies one axis value to a copy of `cfg`.
RunConfig apply_axis(const RunConfig& cfg, const std::string& axis, const std::string& value);

struct AblationRow {
  std::string run_id;
  std::string axis;
  std::string value;
  std::optional<double> top1;
  std::optional<int> stop_step;
  std::optional<double> recover_wall_ms;
  std::optional<double> final_global_cosine;
  std::string status = "ok";
  std::string error;
};

/// Runs one sub-run per value, named <run_id>-<axis>-<value>, sharing the
/// teacher (and, for the schedule axis, the synthetic set) of the base run.
/// Failed values are recorded and the sweep continues. Writes
/// runs/<run_id>/ablate_<axis>.csv.
std::vector<AblationRow> ablate(const RunConfig& cfg, const RunOptions& opts, const std::string& axis,
                                std::vector<std::string> values);

/// run_id, axis, value, top1, stop_step, recover_wall_ms, final_global_cosine, status, error
std::string ablation_csv(const std::vector<AblationRow>& rows);

} // namespace e2d::pipeline

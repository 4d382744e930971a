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

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "evaluate/student.hpp"
#include "recover/engine.hpp"
#include "squeeze/teacher.hpp"

namespace e2d::pipeline {

struct DatasetConfig {
  std::string format = "idx";  // idx | cifar
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::vector<std::string> train_files;  // cifar
  std::vector<std::string> test_files;
  int classes = 10;
  std::vector<float> mean = {0.1307f};
  std::vector<float> std = {0.3081f};
};

struct MetricsConfig {
  int stride = 0;  // 0: iterations / 20
  int probe_crops = 8;
};

/// Every stage's settings. Relative dataset paths resolve against `base_dir`,
/// which is the directory of the config file and is not itself a key.
struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  squeeze::TeacherConfig teacher;
  recover::RecoverConfig recover;
  evaluate::StudentConfig eval;
  MetricsConfig metrics;
  std::string base_dir = ".";
};

/// Dotted names of every key, in serialization order ("seed" first).
std::vector<std::string> config_keys();

/// Parses INI text. Unknown sections or keys, malformed values and violated
/// invariants raise ErrorKind::Config naming `source` and the key.
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::string& path);

/// INI text listing every effective value.
std::string serialize_config(const RunConfig& cfg);

std::string get_key(const RunConfig& cfg, const std::string& key);
/// Sets one key from its text form; the result is not re-validated.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);

/// Cross-field checks for every stage.
void validate(const RunConfig& cfg);

/// Snapshot for the manifest: {"section.key": "value", ...}.
nlohmann::json config_json(const RunConfig& cfg);

/// Recover settings with the metrics stride applied and workers resolved.
recover::RecoverConfig effective_recover(const RunConfig& cfg, bool deterministic);
int effective_stride(const RunConfig& cfg);

} // namespace e2d::pipeline

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
#include <span>
#include <string>

#include "json.hpp"

namespace e2d::pipeline {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
/// Hash of the bytes on disk (no decompression).
std::string sha256_file(const std::filesystem::path& path);

std::string utc_timestamp();

/// runs/<run_id>/manifest.json. Layout:
///   run_id, version, started_at, finished_at, seed, seeds{stage: ...},
///   config{"section.key": value}, dataset{train_sha256, test_sha256, ...},
///   artifacts{name: {path, sha256}}, stages{name: {fingerprint, status,
///   wall_ms, started_at, finished_at, ...}}
class Manifest {
 public:
  static Manifest open(const std::filesystem::path& path, const std::string& run_id);

  void save() const;

  nlohmann::json& json() noexcept { return j_; }
  const nlohmann::json& json() const noexcept { return j_; }
  const std::filesystem::path& path() const noexcept { return path_; }

  void set_artifact(const std::string& name, const std::filesystem::path& file);
  std::optional<std::string> artifact_hash(const std::string& name) const;
  std::optional<std::filesystem::path> artifact_path(const std::string& name) const;

  /// Throws ErrorKind::Fingerprint when `file` is the recorded artifact
  /// `name` and its bytes no longer hash to the recorded value. Returns the
  /// file's hash.
  std::string verify_input(const std::string& name, const std::filesystem::path& file) const;

  nlohmann::json& stage(const std::string& name) { return j_["stages"][name]; }
  const nlohmann::json* find_stage(const std::string& name) const;

 private:
  std::filesystem::path path_;
  nlohmann::json j_;
};

} // namespace e2d::pipeline

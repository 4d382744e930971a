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

#include "pipeline/manifest.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <openssl/evp.h>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace e2d::pipeline {

namespace fs = std::filesystem;

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    require(ctx_ != nullptr && EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) == 1, ErrorKind::Io,
            "sha256: digest initialization failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

} // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(const std::string& text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

std::string utc_timestamp() {
  const auto now = std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
  return fmt::format("{:%Y-%m-%dT%H:%M:%S}Z", now);
}

Manifest Manifest::open(const fs::path& path, const std::string& run_id) {
  Manifest m;
  m.path_ = path;
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      m.j_ = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
    require(m.j_.is_object() && m.j_.value("run_id", "") == run_id, ErrorKind::Format,
            path.string() + ": manifest belongs to a different run");
  } else {
    m.j_ = {{"run_id", run_id}, {"version", E2D_VERSION}, {"started_at", utc_timestamp()},
            {"artifacts", nlohmann::json::object()}, {"stages", nlohmann::json::object()}};
  }
  return m;
}

void Manifest::save() const {
  fs::create_directories(path_.parent_path());
  const fs::path tmp = path_.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j_.dump(2) << "\n";
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path_);
}

void Manifest::set_artifact(const std::string& name, const fs::path& file) {
  j_["artifacts"][name] = {{"path", fs::absolute(file).lexically_normal().string()}, {"sha256", sha256_file(file)}};
}

std::optional<std::string> Manifest::artifact_hash(const std::string& name) const {
  if (!j_.contains("artifacts") || !j_["artifacts"].contains(name)) return std::nullopt;
  return j_["artifacts"][name].value("sha256", "");
}

std::optional<fs::path> Manifest::artifact_path(const std::string& name) const {
  if (!j_.contains("artifacts") || !j_["artifacts"].contains(name)) return std::nullopt;
  return fs::path(j_["artifacts"][name].value("path", ""));
}

std::string Manifest::verify_input(const std::string& name, const fs::path& file) const {
  require(fs::exists(file), ErrorKind::Io, "missing input '" + file.string() + "'");
  const std::string actual = sha256_file(file);
  const auto recorded = artifact_path(name);
  if (recorded && *recorded == fs::absolute(file).lexically_normal()) {
    const std::string expected = *artifact_hash(name);
    require(actual == expected, ErrorKind::Fingerprint,
            fmt::format("{}: sha256 mismatch (manifest {}, file {})", file.string(), expected, actual));
  }
  return actual;
}

const nlohmann::json* Manifest::find_stage(const std::string& name) const {
  if (!j_.contains("stages") || !j_["stages"].contains(name)) return nullptr;
  return &j_["stages"][name];
}

} // namespace e2d::pipeline

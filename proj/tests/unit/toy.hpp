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

// Small synthetic problems shared by the recover, metrics and evaluate tests.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>

#include "common/binio.hpp"
#include "dataio/dataset.hpp"
#include "diffnet/model.hpp"
#include "squeeze/teacher.hpp"

namespace e2d::testing {

// 8x8 grayscale, three classes: bright top-left quadrant, bright bottom-right
// quadrant, bright centre cross. Pixel noise keeps images distinct.
inline dataio::RawDataset toy_dataset(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  dataio::RawDataset ds;
  ds.channels = 1;
  ds.height = ds.width = 8;
  ds.num_classes = 3;
  ds.norm = {{0.4f}, {0.3f}};
  for (int i = 0; i < 3 * per_class; ++i) {
    const int y = i % 3;
    ds.labels.push_back(y);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        bool lit = false;
        if (y == 0) lit = r < 4 && c < 4;
        if (y == 1) lit = r >= 4 && c >= 4;
        if (y == 2) lit = r == 3 || r == 4 || c == 3 || c == 4;
        ds.pixels.push_back(static_cast<std::uint8_t>((lit ? 170 : 30) + uniform_int(rng, 0, 80)));
      }
  }
  return ds;
}

inline diffnet::Model toy_teacher(const dataio::RawDataset& ds, std::uint64_t seed, int epochs = 3,
                                  int depth = 3) {
  squeeze::TeacherConfig cfg;
  cfg.width = 8;
  cfg.depth = depth;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 1e-2;
  Rng rng(seed);
  return squeeze::train_teacher(ds, nullptr, cfg, rng).model;
}

inline std::uint64_t tensor_hash(const diffnet::Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (float v : t.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("e2d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Writes the toy problem as IDX files into `dir` and returns a config for a
// few-second run over them.
inline std::string toy_run_config(const std::filesystem::path& dir) {
  const dataio::RawDataset train = toy_dataset(20, 11);
  const dataio::RawDataset test = toy_dataset(10, 12);
  write_file((dir / "train-images").string(), dataio::serialize_idx_images(train));
  write_file((dir / "train-labels").string(), dataio::serialize_idx_labels(train));
  write_file((dir / "test-images").string(), dataio::serialize_idx_images(test));
  write_file((dir / "test-labels").string(), dataio::serialize_idx_labels(test));
  return "seed = 3\n"
         "[dataset]\n"
         "train_images = " + (dir / "train-images").string() + "\n"
         "train_labels = " + (dir / "train-labels").string() + "\n"
         "test_images = " + (dir / "test-images").string() + "\n"
         "test_labels = " + (dir / "test-labels").string() + "\n"
         "classes = 3\nmean = 0.4\nstd = 0.3\n"
         "[teacher]\nwidth = 4\ndepth = 2\nepochs = 2\nbatch_size = 10\nlr = 0.01\n"
         "[recover]\nipc = 3\niterations = 8\nexplore_iterations = 5\nepsilon = 0.05\nworkers = 2\n"
         "[eval]\nepochs = 2\nbatch_size = 3\nlr = 0.01\ntest_every = 1\nscale_min = 0.5\n"
         "[metrics]\nstride = 2\nprobe_crops = 2\n";
}

} // namespace e2d::testing

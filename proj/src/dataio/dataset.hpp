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
#include <span>
#include <string>
#include <vector>

#include "common/rng.hpp"
#include "diffnet/tensor.hpp"

namespace e2d::dataio {

/// Per-channel normalization applied to pixels scaled to [0, 1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

/// 8-bit images in NCHW order plus class labels.
struct RawDataset {
  int channels = 0;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  Normalization norm;

  std::size_t count() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
  }
};

/// Throws unless labels are in range, every class is non-empty, and pixel
/// and label counts agree.
void validate(const RawDataset& ds);

/// IDX image + label files (optionally gzipped), big-endian headers.
RawDataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                     const std::string& source = "idx");
RawDataset parse_idx_files(const std::string& image_file, const std::string& label_file);

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Concatenated CIFAR-10 binary batches: 1 label byte + 3072 channel-major
/// pixel bytes per record.
RawDataset parse_cifar_bin(std::span<const std::uint8_t> bytes, const std::string& source = "cifar");
RawDataset parse_cifar_files(const std::vector<std::string>& files);

std::vector<std::uint8_t> serialize_idx_images(const RawDataset& ds);
std::vector<std::uint8_t> serialize_idx_labels(const RawDataset& ds);
std::vector<std::uint8_t> serialize_cifar_bin(const RawDataset& ds);

/// Per-class ordinals, ascending; the lists partition [0, count).
struct ClassIndex {
  std::vector<std::vector<int>> members;
};

ClassIndex build_class_index(const RawDataset& ds);

/// `ipc` ordinals of class `c`, uniform without replacement. When the class
/// has fewer than `ipc` members the draw is with replacement and a warning is
/// logged.
std::vector<int> sample_init_images(const RawDataset& ds, const ClassIndex& idx, int c, int ipc, Rng& rng);

/// (count, C, H, W) float tensor of normalized images.
diffnet::Tensor normalized_batch(const RawDataset& ds, std::span<const int> ordinals);
diffnet::Tensor normalize(std::span<const std::uint8_t> pixels, int channels, int height, int width,
                          const Normalization& norm);
/// Inverse of normalize, back to [0, 1] pixel scale (unclamped).
diffnet::Tensor denormalize(const diffnet::Tensor& x, const Normalization& norm);

/// Valid range of normalized pixel values per channel: (0 - mean)/std and
/// (1 - mean)/std.
std::pair<std::vector<float>, std::vector<float>> normalized_bounds(const Normalization& norm);

} // namespace e2d::dataio

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

#include "common/rng.hpp"
#include "dataio/dataset.hpp"
#include "diffnet/tensor.hpp"

namespace e2d::recover {

/// Distilled images in normalized space, class-major: image k belongs to
/// class k / ipc.
struct SyntheticSet {
  int num_classes = 0;
  int ipc = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  dataio::Normalization norm;
  std::vector<diffnet::Tensor> images;  // each (1, C, H, W)
  std::vector<int> provenance;          // source ordinal of each image's initialization
  long step = 0;

  std::size_t count() const noexcept { return images.size(); }
  int label(std::size_t k) const noexcept { return static_cast<int>(k) / ipc; }
  /// (count, C, H, W) stack of every image.
  diffnet::Tensor batch() const;
  /// (ipc, C, H, W) stack of one class.
  diffnet::Tensor class_batch(int c) const;
};

/// Throws unless the invariants hold: count = L x ipc, shapes consistent,
/// pixels finite.
void validate(const SyntheticSet& set);

/// Each image is a verbatim normalized copy of a random training image of its
/// class; draws use one RNG stream per class derived from `seed`.
SyntheticSet init_full_image(const dataio::RawDataset& ds, const dataio::ClassIndex& idx, int ipc,
                             std::uint64_t seed);

inline constexpr std::uint32_t kSynthVersion = 1;

// E2DS layout, little-endian:
//   "E2DS" | u32 version | u32 L | u32 ipc | u32 H | u32 W | u32 C
//   | f32 mean[C] | f32 std[C] | f32 pixels[L*ipc*C*H*W] | u32 provenance[L*ipc]
std::vector<std::uint8_t> serialize_synth(const SyntheticSet& set);
SyntheticSet deserialize_synth(const std::vector<std::uint8_t>& bytes, const std::string& source);
void save_synth(const std::string& path, const SyntheticSet& set);
SyntheticSet load_synth(const std::string& path);

/// Pixel values mapped back to [0, 1] and rounded to 8 bits, for viewing.
std::vector<std::uint8_t> to_8bit(const SyntheticSet& set);

} // namespace e2d::recover

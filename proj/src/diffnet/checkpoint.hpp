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
#include <optional>
#include <string>
#include <vector>

#include "diffnet/model.hpp"

namespace e2d::diffnet {

// E2DC layout, all integers little-endian:
//   "E2DC" | u32 version | u32 layer count
//   records until EOF: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
//
// Record order: "model.input" (C, H, W), "model.layers" (layer count x 6:
// kind, in, out, kernel, stride, padding), every parameter, then every BN
// layer's "<layer>.running_mean" / "<layer>.running_var", then the optional
// "meta.top1".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::optional<double> top1;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, std::optional<double> top1 = {});
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source);

void save_checkpoint(const std::string& path, const Model& model, std::optional<double> top1 = {});
Checkpoint load_checkpoint(const std::string& path);

} // namespace e2d::diffnet

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

#include "diffnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "common/error.hpp"

namespace e2d::diffnet {

std::size_t element_count(const std::vector<int>& shape) {
  require(!shape.empty() && shape.size() <= 4, ErrorKind::Shape,
          "tensor rank must be in [1, 4]");
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 1, ErrorKind::Shape, "tensor dims must be >= 1");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  require(data_.size() == element_count(shape_), ErrorKind::Shape,
          "value count does not match shape " + shape_string());
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::sample(int n) const {
  require(rank() == 4 && n >= 0 && n < shape_[0], ErrorKind::Shape, "sample index out of range");
  const std::size_t per = data_.size() / static_cast<std::size_t>(shape_[0]);
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(per * n),
                         data_.begin() + static_cast<std::ptrdiff_t>(per * (n + 1)));
  return Tensor({1, shape_[1], shape_[2], shape_[3]}, std::move(out));
}

std::uint64_t Tensor::hash() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(data_.data());
  for (std::size_t i = 0; i < data_.size() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string Tensor::shape_string() const {
  std::string s = "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape_[i]);
  }
  return s + ")";
}

Tensor stack_batch(std::span<const Tensor> samples) {
  require(!samples.empty(), ErrorKind::Shape, "cannot stack an empty batch");
  const Tensor& first = samples.front();
  require(first.rank() == 4 && first.dim(0) == 1, ErrorKind::Shape, "stack expects (1, C, H, W)");
  std::vector<float> out;
  out.reserve(first.size() * samples.size());
  for (const Tensor& t : samples) {
    require(t.same_shape(first), ErrorKind::Shape, "stack inputs differ in shape");
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return Tensor({static_cast<int>(samples.size()), first.dim(1), first.dim(2), first.dim(3)},
                std::move(out));
}

} // namespace e2d::diffnet

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

#include "recover/buffer.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace e2d::recover {

MemoryBuffer::MemoryBuffer(int capacity) : capacity_(capacity) {
  require(capacity >= 1, ErrorKind::InvalidArgument, "buffer capacity must be positive");
}

MemoryBuffer::Offer MemoryBuffer::offer(const diffnet::CropSpec& crop, double loss, int step) {
  for (CropRecord& r : records_) {
    if (r.crop == crop) {
      r.loss = loss;
      return Offer::Updated;
    }
  }
  if (records_.size() < static_cast<std::size_t>(capacity_)) {
    records_.push_back({crop, loss, step});
    return Offer::Added;
  }
  auto lowest = std::min_element(records_.begin(), records_.end(),
                                 [](const CropRecord& a, const CropRecord& b) { return a.loss < b.loss; });
  if (loss <= lowest->loss) return Offer::Rejected;
  *lowest = {crop, loss, step};
  return Offer::Replaced;
}

bool MemoryBuffer::refresh(std::size_t j, double loss, double epsilon) {
  require(j < records_.size(), ErrorKind::InvalidArgument, "buffer record index out of range");
  if (loss > epsilon) {
    records_[j].loss = loss;
    return true;
  }
  records_.erase(records_.begin() + static_cast<std::ptrdiff_t>(j));
  return false;
}

std::vector<double> selection_probabilities(std::span<const CropRecord> records) {
  require(!records.empty(), ErrorKind::InvalidArgument, "cannot sample from an empty buffer");
  double top = records[0].loss;
  for (const CropRecord& r : records) top = std::max(top, r.loss);
  std::vector<double> p;
  p.reserve(records.size());
  double total = 0.0;
  for (const CropRecord& r : records) {
    p.push_back(std::exp(r.loss - top));
    total += p.back();
  }
  for (double& v : p) v /= total;
  return p;
}

std::size_t exploit_sample(const MemoryBuffer& buffer, Rng& rng) {
  const std::vector<double> p = selection_probabilities(buffer.records());
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    acc += p[j];
    if (u < acc) return j;
  }
  return p.size() - 1;
}

} // namespace e2d::recover

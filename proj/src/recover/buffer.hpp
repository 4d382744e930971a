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

#include <cstddef>
#include <span>
#include <vector>

#include "common/rng.hpp"
#include "diffnet/ops.hpp"

namespace e2d::recover {

struct CropRecord {
  diffnet::CropSpec crop;
  double loss = 0.0;  // teacher CE at the last evaluation
  int inserted_step = 0;
};

inline constexpr int kDefaultBufferCapacity = 16;

/// Per-image store of high-loss crops. Records are unique by crop
/// coordinates; at capacity the lowest-loss record makes room for a
/// higher-loss newcomer.
class MemoryBuffer {
 public:
  enum class Offer { Added, Updated, Replaced, Rejected };

  explicit MemoryBuffer(int capacity = kDefaultBufferCapacity);

  /// Caller has already checked loss > epsilon.
  Offer offer(const diffnet::CropSpec& crop, double loss, int step);

  /// Re-evaluation of record j: keeps it with the new loss when
  /// loss > epsilon, removes it otherwise. Returns whether it was kept.
  bool refresh(std::size_t j, double loss, double epsilon);

  std::span<const CropRecord> records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  int capacity() const noexcept { return capacity_; }

 private:
  int capacity_;
  std::vector<CropRecord> records_;
};

/// p_j = exp(l_j) / sum_k exp(l_k), computed with max subtraction.
std::vector<double> selection_probabilities(std::span<const CropRecord> records);

/// Index of a record drawn with selection_probabilities. Throws on an empty
/// buffer.
std::size_t exploit_sample(const MemoryBuffer& buffer, Rng& rng);

} // namespace e2d::recover

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

#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffnet/model.hpp"
#include "recover/crops.hpp"
#include "recover/synthetic.hpp"

namespace e2d::metrics {

struct ClassSimilarity {
  int cls = 0;
  std::optional<double> mean_cosine;  // empty for fewer than two usable images
  int skipped_pairs = 0;              // pairs with a zero-norm feature vector
};

struct SimilarityReport {
  int step = 0;
  std::vector<ClassSimilarity> classes;
  std::optional<double> global_mean;  // mean over classes with a value
};

/// (N, F) penultimate features: eval-mode forward, post global pooling.
diffnet::Tensor penultimate_features(const diffnet::Model& teacher, const diffnet::Tensor& batch);

/// Mean cosine over the N(N-1)/2 unordered row pairs of an (N, F) matrix.
/// Pairs involving a zero row are skipped and counted.
std::optional<double> mean_pairwise_cosine(const diffnet::Tensor& features, int* skipped = nullptr);

ClassSimilarity class_similarity(const diffnet::Model& teacher, std::span<const diffnet::Tensor> images, int cls);

SimilarityReport feature_similarity(const diffnet::Model& teacher, const recover::SyntheticSet& set, int step = 0);

/// Fixed probe crops for one class, drawn from their own RNG stream.
std::vector<diffnet::CropSpec> probe_crops(std::uint64_t seed, int cls, int height, int width, int count,
                                           const recover::CropRange& range);

/// Eval-mode teacher CE averaged over every image and every view (the full
/// image plus each probe crop).
double probe_ce(const diffnet::Model& teacher, std::span<const diffnet::Tensor> images, int cls,
                std::span<const diffnet::CropSpec> probes);

struct TracePoint {
  int step = 0;
  int cls = 0;
  std::optional<double> mean_cosine;
  double probe_ce = 0.0;
};

/// Thread-safe collector fed from recover snapshots.
class SimilarityTrace {
 public:
  SimilarityTrace(const diffnet::Model& teacher, std::uint64_t seed, int num_classes, int height, int width,
                  int probe_count, const recover::CropRange& range);

  void record(int cls, int step, std::span<const diffnet::Tensor> images);

  /// Points sorted by (step, class).
  std::vector<TracePoint> points() const;
  /// Global means per step over classes with a value, in step order.
  std::vector<std::pair<int, std::optional<double>>> global_cosine() const;
  std::vector<std::pair<int, double>> global_probe_ce() const;

 private:
  const diffnet::Model& teacher_;
  std::vector<std::vector<diffnet::CropSpec>> probes_;
  mutable std::mutex mu_;
  std::vector<TracePoint> points_;
};

/// run_id, step, class, mean_cosine, global_mean_cosine
std::string similarity_csv(const std::string& run_id, const std::vector<TracePoint>& points);
/// run_id, step, class, probe_ce, global_probe_ce
std::string probe_csv(const std::string& run_id, const std::vector<TracePoint>& points);

} // namespace e2d::metrics

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

#include "metrics/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "common/csv.hpp"
#include "common/error.hpp"
#include "diffnet/ops.hpp"

namespace e2d::metrics {

using diffnet::Graph;
using diffnet::Tensor;

Tensor penultimate_features(const diffnet::Model& teacher, const Tensor& batch) {
  Graph g;
  diffnet::ForwardResult fr = teacher.forward(g, g.input(batch), diffnet::BnMode::Eval);
  return g.value(fr.penultimate);
}

std::optional<double> mean_pairwise_cosine(const Tensor& features, int* skipped) {
  require(features.rank() == 2, ErrorKind::Shape, "features must be (N, F)");
  const int n = features.dim(0), f = features.dim(1);
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < f; ++k) {
      const double v = features[static_cast<std::size_t>(i * f + k)];
      s += v * v;
    }
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  double total = 0.0;
  long pairs = 0;
  int skip = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double ni = norms[static_cast<std::size_t>(i)], nj = norms[static_cast<std::size_t>(j)];
      if (ni == 0.0 || nj == 0.0) {
        ++skip;
        continue;
      }
      double dot = 0.0;
      for (int k = 0; k < f; ++k) {
        dot += static_cast<double>(features[static_cast<std::size_t>(i * f + k)]) * features[static_cast<std::size_t>(j * f + k)];
      }
      total += std::clamp(dot / (ni * nj), -1.0, 1.0);
      ++pairs;
    }
  }
  if (skipped != nullptr) *skipped = skip;
  if (pairs == 0) return std::nullopt;
  return total / static_cast<double>(pairs);
}

ClassSimilarity class_similarity(const diffnet::Model& teacher, std::span<const Tensor> images, int cls) {
  ClassSimilarity out;
  out.cls = cls;
  if (images.size() < 2) return out;
  out.mean_cosine = mean_pairwise_cosine(penultimate_features(teacher, diffnet::stack_batch(images)), &out.skipped_pairs);
  return out;
}

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& xs) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : xs) {
    if (!x) continue;
    s += *x;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

} // namespace

SimilarityReport feature_similarity(const diffnet::Model& teacher, const recover::SyntheticSet& set, int step) {
  SimilarityReport r;
  r.step = step;
  std::vector<std::optional<double>> values;
  for (int c = 0; c < set.num_classes; ++c) {
    std::span<const Tensor> images(set.images.data() + static_cast<std::size_t>(c) * set.ipc, static_cast<std::size_t>(set.ipc));
    r.classes.push_back(class_similarity(teacher, images, c));
    values.push_back(r.classes.back().mean_cosine);
  }
  r.global_mean = mean_of(values);
  return r;
}

std::vector<diffnet::CropSpec> probe_crops(std::uint64_t seed, int cls, int height, int width, int count,
                                           const recover::CropRange& range) {
  Rng rng(derive_seed(seed, "probe", static_cast<std::uint64_t>(cls)));
  std::vector<diffnet::CropSpec> out;
  for (int i = 0; i < count; ++i) out.push_back(recover::sample_rrc(rng, height, width, range));
  return out;
}

double probe_ce(const diffnet::Model& teacher, std::span<const Tensor> images, int cls,
                std::span<const diffnet::CropSpec> probes) {
  require(!images.empty(), ErrorKind::InvalidArgument, "probe_ce needs images");
  std::vector<Tensor> views;
  for (const Tensor& img : images) {
    views.push_back(img);
    for (const diffnet::CropSpec& c : probes) views.push_back(diffnet::crop_resize(img, c));
  }
  Graph g;
  diffnet::ForwardResult fr = teacher.forward(g, g.input(diffnet::stack_batch(views)), diffnet::BnMode::Eval);
  const std::vector<int> labels(views.size(), cls);
  return g.value(diffnet::cross_entropy(g, fr.logits, labels))[0];
}

SimilarityTrace::SimilarityTrace(const diffnet::Model& teacher, std::uint64_t seed, int num_classes, int height,
                                 int width, int probe_count, const recover::CropRange& range)
    : teacher_(teacher) {
  for (int c = 0; c < num_classes; ++c) probes_.push_back(probe_crops(seed, c, height, width, probe_count, range));
}

void SimilarityTrace::record(int cls, int step, std::span<const Tensor> images) {
  TracePoint p;
  p.step = step;
  p.cls = cls;
  p.mean_cosine = class_similarity(teacher_, images, cls).mean_cosine;
  p.probe_ce = probe_ce(teacher_, images, cls, probes_.at(static_cast<std::size_t>(cls)));
  std::lock_guard<std::mutex> lock(mu_);
  points_.push_back(p);
}

std::vector<TracePoint> SimilarityTrace::points() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<TracePoint> out = points_;
  std::sort(out.begin(), out.end(), [](const TracePoint& a, const TracePoint& b) {
    return a.step != b.step ? a.step < b.step : a.cls < b.cls;
  });
  return out;
}

std::vector<std::pair<int, std::optional<double>>> SimilarityTrace::global_cosine() const {
  std::map<int, std::vector<std::optional<double>>> by_step;
  for (const TracePoint& p : points()) by_step[p.step].push_back(p.mean_cosine);
  std::vector<std::pair<int, std::optional<double>>> out;
  for (const auto& [step, vals] : by_step) out.emplace_back(step, mean_of(vals));
  return out;
}

std::vector<std::pair<int, double>> SimilarityTrace::global_probe_ce() const {
  std::map<int, std::pair<double, int>> by_step;
  for (const TracePoint& p : points()) {
    by_step[p.step].first += p.probe_ce;
    by_step[p.step].second += 1;
  }
  std::vector<std::pair<int, double>> out;
  for (const auto& [step, acc] : by_step) out.emplace_back(step, acc.first / acc.second);
  return out;
}

namespace {

template <typename Value, typename Global>
std::string trace_csv(const std::string& header, const std::string& run_id, const std::vector<TracePoint>& points,
                      Value value, Global global) {
  std::map<int, std::vector<std::optional<double>>> by_step;
  for (const TracePoint& p : points) by_step[p.step].push_back(value(p));
  std::string out = header + "\n";
  for (const TracePoint& p : points) {
    out += fmt::format("{},{},{},{},{}\n", csv::field(run_id), p.step, p.cls, csv::number(value(p)),
                       csv::number(global(by_step[p.step])));
  }
  return out;
}

} // namespace

std::string similarity_csv(const std::string& run_id, const std::vector<TracePoint>& points) {
  return trace_csv("run_id,step,class,mean_cosine,global_mean_cosine", run_id, points,
                   [](const TracePoint& p) { return p.mean_cosine; }, mean_of);
}

std::string probe_csv(const std::string& run_id, const std::vector<TracePoint>& points) {
  return trace_csv("run_id,step,class,probe_ce,global_probe_ce", run_id, points,
                   [](const TracePoint& p) { return std::optional<double>(p.probe_ce); }, mean_of);
}

} // namespace e2d::metrics

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

#include <doctest.h>

#include <cmath>
#include <set>

#include "common/csv.hpp"
#include "common/error.hpp"
#include "gradcheck.hpp"
#include "metrics/similarity.hpp"
#include "recover/engine.hpp"
#include "toy.hpp"

using namespace e2d;
using namespace e2d::metrics;
using diffnet::Tensor;

namespace {

struct Toy {
  dataio::RawDataset ds = e2d::testing::toy_dataset(30, 21);
  diffnet::Model teacher = e2d::testing::toy_teacher(ds, 2);
  dataio::ClassIndex idx = dataio::build_class_index(ds);
};

const Toy& toy() {
  static const Toy t;
  return t;
}

Tensor rows(std::vector<std::vector<float>> v) {
  Tensor t({static_cast<int>(v.size()), static_cast<int>(v[0].size())});
  std::size_t k = 0;
  for (const auto& r : v)
    for (float x : r) t[k++] = x;
  return t;
}

double brute_force(const Tensor& f) {
  const int n = f.dim(0), d = f.dim(1);
  long double sum = 0.0L;
  int pairs = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      long double dot = 0.0L, ni = 0.0L, nj = 0.0L;
      for (int k = 0; k < d; ++k) {
        const long double a = f[static_cast<std::size_t>(i * d + k)], b = f[static_cast<std::size_t>(j * d + k)];
        dot += a * b;
        ni += a * a;
        nj += b * b;
      }
      sum += dot / std::sqrt(ni * nj);
      ++pairs;
    }
  return static_cast<double>(sum / pairs);
}

} // namespace

TEST_CASE("duplicate images in a class are fully similar") {
  const Tensor image = dataio::normalized_batch(toy().ds, std::vector<int>{0});
  const std::vector<Tensor> images = {image, image, image};
  const ClassSimilarity s = class_similarity(toy().teacher, images, 0);
  REQUIRE(s.mean_cosine.has_value());
  CHECK(*s.mean_cosine == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("orthogonal features have zero similarity") {
  CHECK(*mean_pairwise_cosine(rows({{1, 0, 0}, {0, 2, 0}})) == 0.0);
  CHECK(*mean_pairwise_cosine(rows({{1, 1}, {1, 1}})) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*mean_pairwise_cosine(rows({{1, 0}, {-3, 0}})) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("class similarity matches a brute-force pairwise recomputation") {
  std::mt19937_64 gen(3);
  for (int n = 2; n <= 8; ++n) {
    const Tensor f = e2d::testing::random_tensor({n, 6}, gen);
    CHECK(std::abs(*mean_pairwise_cosine(f) - brute_force(f)) < 1e-6);
  }
  const recover::SyntheticSet set = recover::init_full_image(toy().ds, toy().idx, 4, 5);
  const Tensor feats = penultimate_features(toy().teacher, set.class_batch(1));
  REQUIRE(feats.dim(0) == 4);
  const SimilarityReport report = feature_similarity(toy().teacher, set, 7);
  CHECK(report.step == 7);
  REQUIRE(report.classes.size() == 3);
  CHECK(std::abs(*report.classes[1].mean_cosine - brute_force(feats)) < 1e-6);
  double mean = 0.0;
  for (const ClassSimilarity& c : report.classes) {
    CHECK(*c.mean_cosine >= -1.0);
    CHECK(*c.mean_cosine <= 1.0);
    mean += *c.mean_cosine / 3.0;
  }
  CHECK(*report.global_mean == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("similarity is symmetric and scale invariant") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = e2d::testing::random_tensor({5, 8}, gen);
    Tensor reversed({5, 8}), scaled = f;
    for (int i = 0; i < 5; ++i)
      for (int k = 0; k < 8; ++k) reversed[static_cast<std::size_t>(i * 8 + k)] = f[static_cast<std::size_t>((4 - i) * 8 + k)];
    for (float& v : scaled.values()) v *= 3.7f;
    const double base = *mean_pairwise_cosine(f);
    CHECK(std::abs(*mean_pairwise_cosine(reversed) - base) < 1e-12);
    CHECK(std::abs(*mean_pairwise_cosine(scaled) - base) < 1e-6);
    CHECK(base >= -1.0);
    CHECK(base <= 1.0);
  }
}

TEST_CASE("zero feature vectors are skipped and counted") {
  int skipped = 0;
  const auto v = mean_pairwise_cosine(rows({{1, 0}, {0, 0}, {1, 1}}), &skipped);
  CHECK(skipped == 2);
  CHECK(*v == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  skipped = 0;
  CHECK_FALSE(mean_pairwise_cosine(rows({{0, 0}, {0, 0}}), &skipped).has_value());
  CHECK(skipped == 1);
}

TEST_CASE("one image per class reports a null entry") {
  const recover::SyntheticSet set = recover::init_full_image(toy().ds, toy().idx, 1, 5);
  const SimilarityReport report = feature_similarity(toy().teacher, set);
  for (const ClassSimilarity& c : report.classes) CHECK_FALSE(c.mean_cosine.has_value());
  CHECK_FALSE(report.global_mean.has_value());
  SimilarityTrace trace(toy().teacher, 1, 3, 8, 8, 2, {});
  trace.record(0, 0, std::span<const Tensor>(set.images.data(), 1));
  const auto parsed = csv::parse(similarity_csv("r", trace.points()));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[1][3].empty());
  CHECK(parsed[1][4].empty());
}

TEST_CASE("a stride longer than the run traces only the endpoints") {
  recover::RecoverConfig cfg;
  cfg.iterations = 12;
  cfg.explore_iterations = 8;
  cfg.ipc = 3;
  cfg.snapshot_stride = 50;
  const recover::SyntheticSet init = recover::init_full_image(toy().ds, toy().idx, 3, 6);
  SimilarityTrace trace(toy().teacher, 6, 3, 8, 8, 4, cfg.crops);
  recover::run_recover(init, toy().teacher, cfg,
                       [&](int cls, int step, std::span<const Tensor> images) { trace.record(cls, step, images); });
  std::set<int> steps;
  for (const TracePoint& p : trace.points()) steps.insert(p.step);
  CHECK(steps == std::set<int>{0, 12});
  CHECK(trace.global_cosine().size() == 2);
}

TEST_CASE("a frozen set gives a constant trace") {
  const recover::SyntheticSet set = recover::init_full_image(toy().ds, toy().idx, 4, 8);
  SimilarityTrace trace(toy().teacher, 8, 3, 8, 8, 4, {});
  for (int step = 0; step <= 50; step += 10)
    for (int c = 0; c < 3; ++c) {
      const std::vector<Tensor> images(set.images.begin() + c * 4, set.images.begin() + (c + 1) * 4);
      trace.record(c, step, images);
    }
  const auto cos = trace.global_cosine();
  const auto ce = trace.global_probe_ce();
  REQUIRE(cos.size() == 6);
  for (std::size_t i = 1; i < cos.size(); ++i) {
    CHECK(*cos[i].second == *cos[0].second);
    CHECK(ce[i].second == ce[0].second);
  }
}

TEST_CASE("probe crops are fixed per seed and class") {
  const recover::CropRange range;
  CHECK(probe_crops(1, 2, 8, 8, 5, range) == probe_crops(1, 2, 8, 8, 5, range));
  CHECK(probe_crops(1, 2, 8, 8, 5, range) != probe_crops(1, 1, 8, 8, 5, range));
  CHECK(probe_crops(1, 2, 8, 8, 0, range).empty());
}

TEST_CASE("probe CE without crops is the full-image teacher CE") {
  const recover::SyntheticSet set = recover::init_full_image(toy().ds, toy().idx, 2, 9);
  const std::vector<Tensor> images(set.images.begin(), set.images.begin() + 2);
  const Tensor logits = toy().teacher.predict(set.class_batch(0));
  long double ce = 0.0L;
  for (int i = 0; i < 2; ++i) {
    long double z = 0.0L;
    for (int k = 0; k < 3; ++k) z += std::exp(static_cast<long double>(logits[static_cast<std::size_t>(3 * i + k)]));
    ce += std::log(z) - logits[static_cast<std::size_t>(3 * i)];
  }
  CHECK(probe_ce(toy().teacher, images, 0, {}) == doctest::Approx(static_cast<double>(ce / 2)).epsilon(1e-5));
}

TEST_CASE("trace CSVs carry the run id and one row per point") {
  const recover::SyntheticSet set = recover::init_full_image(toy().ds, toy().idx, 2, 10);
  SimilarityTrace trace(toy().teacher, 10, 3, 8, 8, 2, {});
  for (int c = 0; c < 3; ++c) {
    const std::vector<Tensor> images(set.images.begin() + c * 2, set.images.begin() + (c + 1) * 2);
    trace.record(c, 5, images);
    trace.record(c, 0, images);
  }
  const auto sim = csv::parse(similarity_csv("run,1", trace.points()));
  REQUIRE(sim.size() == 7);
  CHECK(sim[0] == std::vector<std::string>{"run_id", "step", "class", "mean_cosine", "global_mean_cosine"});
  CHECK(sim[1][0] == "run,1");
  CHECK(sim[1][1] == "0");
  CHECK(sim[4][1] == "5");
  const auto probe = csv::parse(probe_csv("run,1", trace.points()));
  REQUIRE(probe.size() == 7);
  CHECK(probe[0] == std::vector<std::string>{"run_id", "step", "class", "probe_ce", "global_probe_ce"});
  CHECK(std::stod(probe[1][3]) == trace.points()[0].probe_ce);
}

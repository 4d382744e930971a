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

#include "recover/crops.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace e2d::recover {

using diffnet::Graph;
using diffnet::Tensor;

namespace {

struct CropSize {
  int height = 0;
  int width = 0;
};

// One draw of the crop size; false when it does not fit.
bool draw_size(Rng& rng, int height, int width, const CropRange& range, CropSize& out) {
  const double area = static_cast<double>(height) * width;
  const double target = area * (range.scale_lo + (range.scale_hi - range.scale_lo) * uniform01(rng));
  const double log_lo = std::log(range.aspect_lo), log_hi = std::log(range.aspect_hi);
  const double aspect = std::exp(log_lo + (log_hi - log_lo) * uniform01(rng));
  out.width = static_cast<int>(std::lround(std::sqrt(target * aspect)));
  out.height = static_cast<int>(std::lround(std::sqrt(target / aspect)));
  const int min_h = std::min(diffnet::kMinCropEdge, height), min_w = std::min(diffnet::kMinCropEdge, width);
  return out.width >= min_w && out.width <= width && out.height >= min_h && out.height <= height;
}

CropSize fallback_size(int height, int width, const CropRange& range) {
  const double ratio = static_cast<double>(width) / height;
  CropSize s{height, width};
  if (ratio < range.aspect_lo) {
    s.height = static_cast<int>(std::lround(width / range.aspect_lo));
  } else if (ratio > range.aspect_hi) {
    s.width = static_cast<int>(std::lround(height * range.aspect_hi));
  }
  s.height = std::clamp(s.height, std::min(diffnet::kMinCropEdge, height), height);
  s.width = std::clamp(s.width, std::min(diffnet::kMinCropEdge, width), width);
  return s;
}

} // namespace

CropSpec sample_rrc(Rng& rng, int height, int width, const CropRange& range, long* fallbacks) {
  require(height >= 1 && width >= 1, ErrorKind::InvalidArgument, "sample_rrc: empty image");
  CropSize s;
  for (int attempt = 0; attempt < kCropTries; ++attempt) {
    if (!draw_size(rng, height, width, range, s)) continue;
    const int top = uniform_int(rng, 0, height - s.height);
    const int left = uniform_int(rng, 0, width - s.width);
    return {top, left, s.height, s.width, height, width};
  }
  if (fallbacks != nullptr) ++*fallbacks;
  s = fallback_size(height, width, range);
  return {(height - s.height) / 2, (width - s.width) / 2, s.height, s.width, height, width};
}

Tensor gradcam_map(const diffnet::Model& teacher, const Tensor& image, int label) {
  require(image.rank() == 4 && image.dim(0) == 1, ErrorKind::Shape, "gradcam expects a single image");
  Graph g;
  diffnet::Var x = g.input(image, true);
  diffnet::ForwardResult fr = teacher.forward(g, x, diffnet::BnMode::Eval);
  require(fr.last_conv_activation.valid(), ErrorKind::InvalidArgument, "gradcam needs a conv layer");
  const int classes = g.value(fr.logits).dim(1);
  require(label >= 0 && label < classes, ErrorKind::InvalidArgument, "gradcam label out of range");
  Tensor pick({1, classes}, 0.0f);
  pick[static_cast<std::size_t>(label)] = 1.0f;
  g.backward(diffnet::dot(g, fr.logits, pick));

  const Tensor& act = g.value(fr.last_conv_activation);
  const Tensor grad = g.grad(fr.last_conv_activation);
  const int k = act.dim(1), h = act.dim(2), w = act.dim(3);
  Tensor cam({1, 1, h, w}, 0.0f);
  for (int c = 0; c < k; ++c) {
    double alpha = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) alpha += grad.at(0, c, i, j);
    alpha /= static_cast<double>(h) * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) cam.at(0, 0, i, j) += static_cast<float>(alpha * act.at(0, c, i, j));
  }
  for (float& v : cam.values()) v = std::max(v, 0.0f);
  Tensor up = diffnet::crop_resize(cam, CropSpec{0, 0, h, w, image.dim(2), image.dim(3)});
  const float top = *std::max_element(up.values().begin(), up.values().end());
  if (!(top > 0.0f)) {
    up.fill(0.0f);
    return up;
  }
  for (float& v : up.values()) v = std::clamp(v / top, 0.0f, 1.0f);
  return up;
}

std::vector<double> center_weights(const Tensor& map) {
  std::vector<double> w(map.size());
  double total = 0.0;
  bool any_hot = false;
  for (std::size_t i = 0; i < map.size(); ++i) {
    any_hot = any_hot || map[i] > 0.0f;
    w[i] = 1.0 - std::clamp(static_cast<double>(map[i]), 0.0, 1.0);
    total += w[i];
  }
  if (!any_hot || total <= 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

CropSpec sample_inverse_activation(Rng& rng, const Tensor& map, const CropRange& range, long* fallbacks) {
  require(map.rank() == 4 && map.dim(0) == 1 && map.dim(1) == 1, ErrorKind::Shape, "map must be (1, 1, H, W)");
  const int height = map.dim(2), width = map.dim(3);
  const std::vector<double> w = center_weights(map);
  double u = uniform01(rng), acc = 0.0;
  std::size_t pick = w.size() - 1;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) {
      pick = i;
      break;
    }
  }
  const int cy = static_cast<int>(pick) / width, cx = static_cast<int>(pick) % width;
  CropSize s;
  bool ok = false;
  for (int attempt = 0; attempt < kCropTries && !ok; ++attempt) ok = draw_size(rng, height, width, range, s);
  if (!ok) {
    if (fallbacks != nullptr) ++*fallbacks;
    s = fallback_size(height, width, range);
  }
  const int top = std::clamp(cy - s.height / 2, 0, height - s.height);
  const int left = std::clamp(cx - s.width / 2, 0, width - s.width);
  return {top, left, s.height, s.width, height, width};
}

} // namespace e2d::recover

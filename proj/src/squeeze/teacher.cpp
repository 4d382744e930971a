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

#include "squeeze/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "common/error.hpp"
#include "diffnet/ops.hpp"

namespace e2d::squeeze {

using diffnet::Graph;
using diffnet::Model;
using diffnet::Tensor;

double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

Tensor crop_flip(const Tensor& image, int pad, Rng& rng) {
  const int c = image.dim(1), h = image.dim(2), w = image.dim(3);
  const int dy = uniform_int(rng, -pad, pad);
  const int dx = uniform_int(rng, -pad, pad);
  const bool flip = uniform01(rng) < 0.5;
  Tensor out({1, c, h, w}, 0.0f);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i) {
      const int si = i + dy;
      if (si < 0 || si >= h) continue;
      for (int j = 0; j < w; ++j) {
        const int sj = (flip ? w - 1 - j : j) + dx;
        if (sj < 0 || sj >= w) continue;
        out.at(0, ch, i, j) = image.at(0, ch, si, sj);
      }
    }
  return out;
}

std::vector<int> predict_labels(const Model& model, const dataio::RawDataset& ds) {
  constexpr int kBatch = 256;
  std::vector<int> out;
  out.reserve(ds.count());
  std::vector<int> ords;
  for (std::size_t start = 0; start < ds.count(); start += kBatch) {
    ords.clear();
    for (std::size_t i = start; i < std::min(ds.count(), start + kBatch); ++i) ords.push_back(static_cast<int>(i));
    const Tensor logits = model.predict(dataio::normalized_batch(ds, ords));
    const int classes = logits.dim(1);
    for (int n = 0; n < logits.dim(0); ++n) {
      const float* row = logits.data() + static_cast<std::size_t>(n) * classes;
      out.push_back(static_cast<int>(std::max_element(row, row + classes) - row));
    }
  }
  return out;
}

double evaluate_model(const Model& model, const dataio::RawDataset& ds) {
  require(ds.count() > 0, ErrorKind::InvalidArgument, "cannot evaluate on an empty split");
  const std::vector<int> pred = predict_labels(model, ds);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(ds.count());
}

TeacherResult train_teacher(const dataio::RawDataset& train, const dataio::RawDataset* held_out,
                            const TeacherConfig& cfg, Rng& rng, const EpochCallback& on_epoch) {
  dataio::validate(train);
  require(cfg.epochs >= 0 && cfg.batch_size >= 1 && cfg.width >= 1 && cfg.depth >= 1, ErrorKind::InvalidArgument,
          "bad teacher configuration");

  TeacherResult res;
  res.model = Model::convnet({train.channels, train.height, train.width}, train.num_classes, cfg.width, cfg.depth);
  res.model.initialize(rng);
  diffnet::AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const long batches_per_epoch = static_cast<long>((train.count() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = batches_per_epoch * cfg.epochs;
  long step = 0;
  std::vector<int> order(train.count());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Model last_good = res.model;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    try {
      for (long b = 0; b < batches_per_epoch; ++b) {
        const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
        const std::size_t hi = std::min(train.count(), lo + cfg.batch_size);
        std::span<const int> ords(order.data() + lo, hi - lo);
        Tensor x = dataio::normalized_batch(train, ords);
        if (cfg.augment) {
          std::vector<Tensor> aug;
          aug.reserve(ords.size());
          for (std::size_t i = 0; i < ords.size(); ++i) aug.push_back(crop_flip(x.sample(static_cast<int>(i)), cfg.crop_padding, rng));
          x = diffnet::stack_batch(aug);
        }
        std::vector<int> y;
        for (int o : ords) y.push_back(train.labels[static_cast<std::size_t>(o)]);

        res.model.zero_grad();
        Graph g;
        auto fr = res.model.forward_train(g, g.input(std::move(x)));
        diffnet::Var loss = diffnet::cross_entropy(g, fr.logits, y);
        const double l = g.value(loss)[0];
        g.backward(loss);
        opt.set_lr(cosine_lr(cfg.lr, step++, total_steps));
        opt.step(res.model.parameters());
        require(res.model.parameters_finite(), ErrorKind::NonFinite, "teacher parameters became non-finite");
        res.batch_losses.push_back(l);
        epoch_loss += l;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
      res.model = last_good;
      res.diverged = true;
      break;
    }
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(batches_per_epoch));
  }
  if (held_out != nullptr) res.top1 = evaluate_model(res.model, *held_out);
  return res;
}

} // namespace e2d::squeeze

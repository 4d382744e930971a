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

#include <functional>
#include <vector>

#include "common/rng.hpp"
#include "dataio/dataset.hpp"
#include "diffnet/adamw.hpp"
#include "diffnet/model.hpp"

namespace e2d::squeeze {

struct TeacherConfig {
  int width = 32;
  int depth = 3;  // conv blocks
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.01;
  // Random crop with zero padding plus horizontal flip; off for MNIST.
  bool augment = false;
  int crop_padding = 4;
};

struct TeacherResult {
  diffnet::Model model;
  std::vector<double> batch_losses;  // every training batch, in order
  double top1 = 0.0;                 // on the held-out split, when given
  bool diverged = false;             // model is then the last good epoch
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Trains a ConvNet from scratch on `train` with AdamW and per-step cosine
/// decay. A non-finite loss stops training and restores the weights from the
/// start of the failing epoch.
TeacherResult train_teacher(const dataio::RawDataset& train, const dataio::RawDataset* held_out,
                            const TeacherConfig& cfg, Rng& rng, const EpochCallback& on_epoch = {});

/// Eval-mode argmax predictions.
std::vector<int> predict_labels(const diffnet::Model& model, const dataio::RawDataset& ds);

/// Top-1 accuracy in [0, 1].
double evaluate_model(const diffnet::Model& model, const dataio::RawDataset& ds);

/// Cosine decay from `base` to 0 over `total` steps, evaluated at `step`.
double cosine_lr(double base, long step, long total);

/// Pads by `pad` zeros (in normalized space, i.e. the channel mean), takes a
/// random crop of the original size, then flips with probability 1/2.
diffnet::Tensor crop_flip(const diffnet::Tensor& image, int pad, Rng& rng);

} // namespace e2d::squeeze

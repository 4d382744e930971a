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

#include <span>
#include <vector>

#include "diffnet/graph.hpp"

namespace e2d::diffnet {

/// Crop rectangle in source pixel coordinates plus the output resolution.
struct CropSpec {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  int out_height = 0;
  int out_width = 0;

  bool operator==(const CropSpec&) const = default;
};

/// Smallest crop edge the samplers produce.
inline constexpr int kMinCropEdge = 4;

void validate_crop(const CropSpec& crop, int image_height, int image_width);

// Layers. All rank-4 inputs are NCHW.

/// Cross-correlation with zero padding, no bias. `weight` is (OC, C, KH, KW).
Var conv2d(Graph& g, Var x, Var weight, int stride, int padding);

/// Batch-statistics normalization; updates the running buffers in place with
/// an exponential moving average (unbiased variance), as in training.
Var batch_norm_train(Graph& g, Var x, Var gamma, Var beta, Tensor& running_mean,
                     Tensor& running_var, float momentum, float eps);

/// Normalization with fixed running statistics.
Var batch_norm_eval(Graph& g, Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, float eps);

struct Moments {
  Var mean;
  Var var;
};

/// Per-channel mean and biased variance over (N, H, W); both differentiable.
Moments channel_moments(Graph& g, Var x);

Var relu(Graph& g, Var x);
Var max_pool2d(Graph& g, Var x, int kernel, int stride);
/// (N, C, H, W) -> (N, C)
Var global_avg_pool(Graph& g, Var x);
/// x (N, F), weight (O, F), bias (O) -> (N, O)
Var linear(Graph& g, Var x, Var weight, Var bias);

/// Bilinear resample of a crop of a (1, C, H, W) image to
/// (1, C, out_height, out_width). Half-pixel centers, align_corners = false,
/// edge-clamped sampling inside the crop.
Var crop_resize(Graph& g, Var image, const CropSpec& crop);

/// Plain-tensor version of crop_resize for augmentation paths.
Tensor crop_resize(const Tensor& image, const CropSpec& crop);

/// Concatenates rank-4 variables along the batch axis.
Var concat_batch(Graph& g, std::span<const Var> parts);

/// Selects one sample (1, C, H, W) of a rank-4 variable.
Var select_sample(Graph& g, Var x, int n);

// Reductions and losses. Scalars are shape (1).

Var sum(Graph& g, Var x);

/// Σ x · weights over all elements; weights has x's element count.
Var dot(Graph& g, Var x, const Tensor& weights);

/// Σ w_i · x_i over scalar variables.
Var weighted_sum(Graph& g, std::span<const Var> terms, std::span<const double> weights);

/// Σ (x − target)², target a constant of the same shape.
Var squared_distance(Graph& g, Var x, const Tensor& target);

/// Mean over the batch of −log softmax(logits)[label]. When `per_sample` is
/// non-null it receives each row's loss.
Var cross_entropy(Graph& g, Var logits, std::span<const int> labels,
                  std::vector<double>* per_sample = nullptr);

/// Mean over the batch of −Σ target · log softmax(logits). Each target row
/// must sum to 1 within 1e-5.
Var cross_entropy_soft(Graph& g, Var logits, const Tensor& targets,
                       std::vector<double>* per_sample = nullptr);

/// Batch mean of KL(softmax(teacher) ‖ softmax(student)).
Var kl_divergence(Graph& g, Var student_logits, const Tensor& teacher_logits);

/// Mean over all elements of (x − target)².
Var mean_squared_error(Graph& g, Var x, const Tensor& target);

/// Row-wise softmax of a (N, L) tensor, accumulated in double.
Tensor softmax(const Tensor& logits);

} // namespace e2d::diffnet

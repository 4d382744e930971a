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

#include <string>
#include <vector>

#include "common/rng.hpp"
#include "diffnet/graph.hpp"
#include "diffnet/ops.hpp"

namespace e2d::diffnet {

enum class LayerKind { Conv, BatchNorm, Relu, MaxPool, GlobalAvgPool, Linear };

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_features = 0;   // conv/bn: input channels; linear: input features
  int out_features = 0;  // conv: output channels; linear: classes
  int kernel = 0;        // conv, maxpool
  int stride = 1;
  int padding = 0;

  bool operator==(const LayerSpec&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Frozen per-BN-layer running statistics, in chain order.
struct BNStats {
  std::vector<Tensor> mean;
  std::vector<Tensor> var;
  float momentum = 0.1f;
};

enum class BnMode {
  Train,    // batch statistics, running stats updated
  Eval,     // running statistics
  Capture,  // running statistics; batch moments of each BN input returned
};

struct ForwardResult {
  Var logits;
  Var penultimate;           // globally pooled features, (N, C)
  Var last_conv_activation;  // post-ReLU output of the last conv block
  std::vector<Var> bn_means; // Capture only, one per BN layer
  std::vector<Var> bn_vars;
};

struct InputShape {
  int channels = 1;
  int height = 28;
  int width = 28;

  bool operator==(const InputShape&) const = default;
};

inline constexpr float kBnEps = 1e-5f;
inline constexpr float kBnMomentum = 0.1f;

/// Linear chain of conv-BN-ReLU-pool blocks, global average pool and a linear
/// classifier.
class Model {
 public:
  Model() = default;

  /// `blocks` x [conv3x3(pad 1) -> BN -> ReLU -> maxpool2], GAP, linear.
  static Model convnet(InputShape input, int classes, int width, int blocks = 3);

  /// Validates the chain: ends in a linear classifier, exactly one BN after
  /// each conv, channel counts consistent.
  static Model from_layers(InputShape input, std::vector<LayerSpec> layers);

  /// Kaiming-normal conv weights, PyTorch-style uniform linear init, BN at
  /// identity, running stats (0, 1).
  void initialize(Rng& rng);

  /// Train-mode forward. Parameter gradients accumulate when trainable.
  ForwardResult forward_train(Graph& g, Var batch);

  /// Eval- or capture-mode forward; never mutates the model, so one model
  /// may serve concurrent forwards on distinct graphs.
  ForwardResult forward(Graph& g, Var batch, BnMode mode) const;

  /// Convenience: eval-mode logits for a batch without gradients.
  Tensor predict(const Tensor& batch) const;

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const InputShape& input_shape() const noexcept { return input_; }
  int num_classes() const;
  int feature_width() const;

  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  BNStats& bn_stats() noexcept { return bn_; }
  const BNStats& bn_stats() const noexcept { return bn_; }

  bool trainable() const noexcept { return trainable_; }
  void set_trainable(bool on) noexcept { trainable_ = on; }
  void zero_grad();

  bool parameters_finite() const;

 private:
  void build_parameters();
  // `train_params` / `train_bn` are non-null only for train mode.
  ForwardResult run(Graph& g, Var batch, BnMode mode, std::vector<Parameter>* train_params,
                    BNStats* train_bn) const;

  InputShape input_;
  std::vector<LayerSpec> layers_;
  std::vector<Parameter> params_;
  BNStats bn_;
  bool trainable_ = true;
};

/// Dispatches on the BN mode; train mode requires a mutable model.
ForwardResult forward(Model& model, Graph& g, Var batch, BnMode mode);

} // namespace e2d::diffnet

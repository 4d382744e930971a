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

#include "diffnet/model.hpp"

#include <cmath>
#include <string>

#include "common/error.hpp"

namespace e2d::diffnet {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "avgpool-global";
    case LayerKind::Linear: return "linear";
  }
  return "unknown";
}

Model Model::convnet(InputShape input, int classes, int width, int blocks) {
  require(classes >= 1 && width >= 1 && blocks >= 1, ErrorKind::InvalidArgument,
          "convnet needs positive classes, width and blocks");
  std::vector<LayerSpec> layers;
  int channels = input.channels;
  for (int b = 0; b < blocks; ++b) {
    layers.push_back({LayerKind::Conv, channels, width, 3, 1, 1});
    layers.push_back({LayerKind::BatchNorm, width, width, 0, 1, 0});
    layers.push_back({LayerKind::Relu});
    layers.push_back({LayerKind::MaxPool, 0, 0, 2, 2, 0});
    channels = width;
  }
  layers.push_back({LayerKind::GlobalAvgPool});
  layers.push_back({LayerKind::Linear, width, classes});
  return from_layers(input, std::move(layers));
}

Model Model::from_layers(InputShape input, std::vector<LayerSpec> layers) {
  require(input.channels >= 1 && input.height >= 1 && input.width >= 1, ErrorKind::InvalidArgument,
          "model input shape must be positive");
  require(!layers.empty() && layers.back().kind == LayerKind::Linear, ErrorKind::InvalidArgument,
          "model chain must end in a linear classifier");
  int channels = input.channels, h = input.height, w = input.width;
  bool pooled = false;
  bool conv_pending_bn = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    if (conv_pending_bn) {
      require(l.kind == LayerKind::BatchNorm, ErrorKind::InvalidArgument, where + ": conv must be followed by batchnorm");
      conv_pending_bn = false;
    }
    switch (l.kind) {
      case LayerKind::Conv:
        require(!pooled && l.in_features == channels && l.out_features >= 1 && l.kernel >= 1 &&
                    l.stride >= 1 && l.padding >= 0,
                ErrorKind::InvalidArgument, where + ": inconsistent conv spec");
        h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
        w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
        require(h >= 1 && w >= 1, ErrorKind::InvalidArgument, where + ": spatial size collapses");
        channels = l.out_features;
        conv_pending_bn = true;
        break;
      case LayerKind::BatchNorm:
        require(!pooled && i > 0 && layers[i - 1].kind == LayerKind::Conv && l.in_features == channels,
                ErrorKind::InvalidArgument, where + ": batchnorm must directly follow a conv");
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool:
        require(!pooled && l.kernel >= 1 && l.stride >= 1 && h >= l.kernel && w >= l.kernel,
                ErrorKind::InvalidArgument, where + ": pooling window larger than feature map");
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
        break;
      case LayerKind::GlobalAvgPool:
        require(!pooled, ErrorKind::InvalidArgument, where + ": pooled twice");
        pooled = true;
        break;
      case LayerKind::Linear:
        require(pooled && i + 1 == layers.size() && l.in_features == channels && l.out_features >= 1,
                ErrorKind::InvalidArgument, where + ": classifier must be last and match features");
        break;
    }
  }
  Model m;
  m.input_ = input;
  m.layers_ = std::move(layers);
  m.build_parameters();
  return m;
}

void Model::build_parameters() {
  params_.clear();
  bn_.mean.clear();
  bn_.var.clear();
  bn_.momentum = kBnMomentum;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string prefix = "layer" + std::to_string(i);
    auto add = [&](const std::string& suffix, std::vector<int> shape, float fill) {
      Tensor v(shape, fill);
      params_.push_back({prefix + suffix, v, Tensor(std::move(shape), 0.0f)});
    };
    switch (l.kind) {
      case LayerKind::Conv:
        add(".weight", {l.out_features, l.in_features, l.kernel, l.kernel}, 0.0f);
        break;
      case LayerKind::BatchNorm:
        add(".weight", {l.in_features}, 1.0f);
        add(".bias", {l.in_features}, 0.0f);
        bn_.mean.emplace_back(std::vector<int>{l.in_features}, 0.0f);
        bn_.var.emplace_back(std::vector<int>{l.in_features}, 1.0f);
        break;
      case LayerKind::Linear:
        add(".weight", {l.out_features, l.in_features}, 0.0f);
        add(".bias", {l.out_features}, 0.0f);
        break;
      default:
        break;
    }
  }
}

void Model::initialize(Rng& rng) {
  std::size_t p = 0;
  for (const LayerSpec& l : layers_) {
    if (l.kind == LayerKind::Conv) {
      const double fan_in = static_cast<double>(l.in_features) * l.kernel * l.kernel;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (float& v : params_[p].value.values()) v = static_cast<float>(dist(rng));
      p += 1;
    } else if (l.kind == LayerKind::BatchNorm) {
      params_[p].value.fill(1.0f);
      params_[p + 1].value.fill(0.0f);
      p += 2;
    } else if (l.kind == LayerKind::Linear) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_features));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (float& v : params_[p].value.values()) v = static_cast<float>(dist(rng));
      for (float& v : params_[p + 1].value.values()) v = static_cast<float>(dist(rng));
      p += 2;
    }
  }
  for (Tensor& t : bn_.mean) t.fill(0.0f);
  for (Tensor& t : bn_.var) t.fill(1.0f);
}

int Model::num_classes() const { return layers_.back().out_features; }

int Model::feature_width() const { return layers_.back().in_features; }

void Model::zero_grad() {
  for (Parameter& p : params_) p.grad.fill(0.0f);
}

bool Model::parameters_finite() const {
  for (const Parameter& p : params_) {
    if (!p.value.all_finite()) return false;
  }
  for (std::size_t i = 0; i < bn_.mean.size(); ++i) {
    if (!bn_.mean[i].all_finite() || !bn_.var[i].all_finite()) return false;
  }
  return true;
}

ForwardResult Model::run(Graph& g, Var batch, BnMode mode, std::vector<Parameter>* train_params,
                         BNStats* train_bn) const {
  const Tensor& x = g.value(batch);
  require(x.rank() == 4 && x.dim(1) == input_.channels && x.dim(2) == input_.height &&
              x.dim(3) == input_.width,
          ErrorKind::Shape,
          "batch " + x.shape_string() + " does not match model input (" +
              std::to_string(input_.channels) + ", " + std::to_string(input_.height) + ", " +
              std::to_string(input_.width) + ")");

  auto bind = [&](std::size_t index) {
    if (train_params) {
      Parameter& p = (*train_params)[index];
      return g.external(p.value, trainable_ ? &p.grad : nullptr);
    }
    return g.external(params_[index].value, nullptr);
  };

  ForwardResult result;
  Var h = batch;
  std::size_t p = 0;
  std::size_t bn_index = 0;
  for (const LayerSpec& l : layers_) {
    switch (l.kind) {
      case LayerKind::Conv:
        h = conv2d(g, h, bind(p), l.stride, l.padding);
        p += 1;
        break;
      case LayerKind::BatchNorm: {
        Var gamma = bind(p), beta = bind(p + 1);
        p += 2;
        if (mode == BnMode::Train) {
          h = batch_norm_train(g, h, gamma, beta, train_bn->mean[bn_index], train_bn->var[bn_index],
                               bn_.momentum, kBnEps);
        } else {
          if (mode == BnMode::Capture) {
            Moments mo = channel_moments(g, h);
            result.bn_means.push_back(mo.mean);
            result.bn_vars.push_back(mo.var);
          }
          h = batch_norm_eval(g, h, gamma, beta, bn_.mean[bn_index], bn_.var[bn_index], kBnEps);
        }
        ++bn_index;
        break;
      }
      case LayerKind::Relu:
        h = relu(g, h);
        result.last_conv_activation = h;
        break;
      case LayerKind::MaxPool:
        h = max_pool2d(g, h, l.kernel, l.stride);
        break;
      case LayerKind::GlobalAvgPool:
        h = global_avg_pool(g, h);
        result.penultimate = h;
        break;
      case LayerKind::Linear:
        h = linear(g, h, bind(p), bind(p + 1));
        p += 2;
        break;
    }
  }
  result.logits = h;
  return result;
}

ForwardResult Model::forward_train(Graph& g, Var batch) {
  return run(g, batch, BnMode::Train, &params_, &bn_);
}

ForwardResult Model::forward(Graph& g, Var batch, BnMode mode) const {
  require(mode != BnMode::Train, ErrorKind::InvalidArgument,
          "train-mode forward needs a mutable model; use forward_train");
  return run(g, batch, mode, nullptr, nullptr);
}

Tensor Model::predict(const Tensor& batch) const {
  Graph g;
  Var x = g.input(batch);
  return g.value(forward(g, x, BnMode::Eval).logits);
}

ForwardResult forward(Model& model, Graph& g, Var batch, BnMode mode) {
  if (mode == BnMode::Train) return model.forward_train(g, batch);
  return model.forward(g, batch, mode);
}

} // namespace e2d::diffnet

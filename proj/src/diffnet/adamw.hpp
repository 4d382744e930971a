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

#include <cstdint>
#include <vector>

#include "diffnet/model.hpp"
#include "diffnet/tensor.hpp"

namespace e2d::diffnet {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Each parameter tensor owns a slot with its
/// own moment buffers and step counter, so tensors that skip a step (frozen
/// synthetic images) keep a correct bias correction.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }

  /// p <- p - lr*wd*p, then the bias-corrected Adam step.
  void update(std::size_t slot, Tensor& param, const Tensor& grad);

  /// Updates every parameter of a model in slot order.
  void step(std::vector<Parameter>& params);

  std::int64_t steps(std::size_t slot) const;

  struct Slot {
    Tensor m;
    Tensor v;
    std::int64_t step = 0;
  };
  const std::vector<Slot>& slots() const noexcept { return slots_; }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
};

} // namespace e2d::diffnet

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

#include "diffnet/adamw.hpp"

#include <cmath>

#include "common/error.hpp"

namespace e2d::diffnet {

void AdamW::update(std::size_t slot, Tensor& param, const Tensor& grad) {
  require(param.same_shape(grad), ErrorKind::Shape,
          "adamw: gradient " + grad.shape_string() + " does not match parameter " + param.shape_string());
  if (slot >= slots_.size()) slots_.resize(slot + 1);
  Slot& s = slots_[slot];
  if (s.m.empty()) {
    s.m = Tensor(param.shape(), 0.0f);
    s.v = Tensor(param.shape(), 0.0f);
  }
  require(s.m.same_shape(param), ErrorKind::Shape, "adamw: optimizer state shape mismatch");

  s.step += 1;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
  const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * s.m[i] + (1.0 - b1) * g;
    const double v = b2 * s.v[i] + (1.0 - b2) * g * g;
    s.m[i] = static_cast<float>(m);
    s.v[i] = static_cast<float>(v);
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    param[i] = static_cast<float>(param[i] * decay - cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
  }
}

void AdamW::step(std::vector<Parameter>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) update(i, params[i].value, params[i].grad);
}

std::int64_t AdamW::steps(std::size_t slot) const {
  return slot < slots_.size() ? slots_[slot].step : 0;
}

} // namespace e2d::diffnet

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

// Central finite-difference oracle. Independent of the backward closures: it
// only ever evaluates forward passes on perturbed copies of the leaves.

#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "diffnet/graph.hpp"

namespace e2d::testing {

using diffnet::Graph;
using diffnet::Tensor;
using diffnet::Var;

using LossFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
  double max_abs_error = 0.0;
  double numeric_norm = 0.0;
};

inline double evaluate(const LossFn& fn, const std::vector<Tensor>& leaves) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : leaves) vars.push_back(g.input(t, true));
  return g.value(fn(g, vars))[0];
}

/// Compares backward() against central differences for every leaf marked in
/// `check` (all leaves when empty).
inline GradCheckResult grad_check(const LossFn& fn, const std::vector<Tensor>& leaves, double h = 1e-3,
                                  std::vector<bool> check = {}) {
  if (check.empty()) check.assign(leaves.size(), true);
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : leaves) vars.push_back(g.input(t, true));
  Var loss = fn(g, vars);
  g.backward(loss);

  double diff2 = 0.0, an2 = 0.0, nu2 = 0.0, max_abs = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    if (!check[k]) continue;
    const Tensor analytic = g.grad(vars[k]);
    for (std::size_t i = 0; i < leaves[k].size(); ++i) {
      std::vector<Tensor> plus = leaves, minus = leaves;
      plus[k][i] += static_cast<float>(h);
      minus[k][i] -= static_cast<float>(h);
      const double step = static_cast<double>(plus[k][i]) - static_cast<double>(minus[k][i]);
      const double numeric = (evaluate(fn, plus) - evaluate(fn, minus)) / step;
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      an2 += a * a;
      nu2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(a - numeric));
    }
  }
  GradCheckResult r;
  r.rel_error = std::sqrt(diff2) / std::max(std::sqrt(an2) + std::sqrt(nu2), 1e-12);
  r.max_abs_error = max_abs;
  r.numeric_norm = std::sqrt(nu2);
  return r;
}

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (float& v : t.values()) v = static_cast<float>(d(rng));
  return t;
}

/// Values whose magnitude is at least `gap`, so ReLU kinks are never crossed
/// by a finite-difference step.
inline Tensor random_away_from_zero(std::vector<int> shape, std::mt19937_64& rng, double gap = 0.05) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (float& v : t.values()) v = static_cast<float>(sign(rng) ? d(rng) : -d(rng));
  return t;
}

} // namespace e2d::testing

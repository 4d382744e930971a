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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common/rng.hpp"
#include "dataio/dataset.hpp"
#include "diffnet/graph.hpp"
#include "diffnet/model.hpp"
#include "recover/crops.hpp"
#include "recover/synthetic.hpp"

namespace e2d::evaluate {

/// Multiplier of the base learning rate at iteration i of n:
///   (1 + cos(i*pi/(zeta*n)))/2                               for i <= 5n/6
///   (1 + cos(5*pi/(6*zeta)))/2 * (6n - 6i)/(6n)               otherwise
double ssrs_lr(long i, long n, double zeta);

/// (1 + cos(pi*i/n))/2.
double cosine_multiplier(long i, long n);

/// 1, then 0.1 from 50% and 0.01 from 75% of the iterations.
double multistep_multiplier(long i, long n);

enum class Schedule { Ssrs, Cosine, MultiStep };
enum class SoftLoss { Kl, MseGtPlusCe };

const char* schedule_name(Schedule s);
Schedule parse_schedule(const std::string& name);
const char* soft_loss_name(SoftLoss l);
SoftLoss parse_soft_loss(const std::string& name);

inline constexpr double kDefaultCeWeight = 0.025;

struct StudentConfig {
  int width = 0;  // 0: the teacher's width
  int epochs = 300;
  int batch_size = 100;
  double lr = 1e-3;
  double weight_decay = 0.01;
  SoftLoss loss = SoftLoss::Kl;
  double ce_weight = kDefaultCeWeight;
  double ema_rate = 0.99;
  recover::CropRange crops{0.25, 1.0, 3.0 / 4.0, 4.0 / 3.0};
  double flip_prob = 0.5;
  double cutmix_alpha = 1.0;
  double cutmix_prob = 0.5;
  Schedule schedule = Schedule::Ssrs;
  double zeta = 2.0;
  int test_every = 25;  // epochs between held-out evaluations
  std::uint64_t seed = 0;
};

/// Throws ErrorKind::Config on violated invariants.
void validate(const StudentConfig& cfg);

/// Learning-rate multiplier at iteration i of n for the configured schedule.
double lr_multiplier(const StudentConfig& cfg, long i, long n);

struct CutMixResult {
  diffnet::Tensor images;
  diffnet::Tensor labels;  // (N, L) rows summing to 1
  double lambda = 1.0;     // kept-area fraction after box clipping
  diffnet::CropSpec box;   // pasted region; zero-sized when nothing was pasted
};

/// Pastes `box` from image partner[i] into image i for every i. Labels mix by
/// the exact pasted-area ratio.
CutMixResult apply_cutmix(const diffnet::Tensor& images, const diffnet::Tensor& labels, const diffnet::CropSpec& box,
                          std::span<const int> partner);

/// Pastes a box covering about (1 - lambda) of the area from a shuffled
/// partner into every image. Labels mix by the exact integer-area ratio.
CutMixResult cutmix_with_lambda(const diffnet::Tensor& images, const diffnet::Tensor& labels, double lambda, Rng& rng);

/// Beta(alpha, alpha) draw as a ratio of gamma variates.
double sample_beta(Rng& rng, double alpha);

/// lambda ~ Beta(alpha, alpha). Batches of one are returned unchanged.
CutMixResult cutmix(const diffnet::Tensor& images, const diffnet::Tensor& labels, double alpha, Rng& rng);

/// kl: KL(softmax(teacher) || softmax(student)).
/// mse-gt-plus-ce: MSE(student, teacher) + ce_weight * CE(student, targets).
/// `targets` (N, L) is required by mse-gt-plus-ce.
diffnet::Var soft_label_loss(diffnet::Graph& g, diffnet::Var student_logits, const diffnet::Tensor& teacher_logits,
                             const diffnet::Tensor* targets, SoftLoss mode, double ce_weight = kDefaultCeWeight);

struct EvalRow {
  int epoch = 0;
  double lr_multiplier = 0.0;
  double train_loss = 0.0;
  double test_top1 = 0.0;
  double ema_test_top1 = 0.0;
  double wall_ms = 0.0;
};

struct StudentResult {
  diffnet::Model student;
  diffnet::Model ema;
  double top1 = 0.0;      // final reported accuracy (EMA weights when ema_rate > 0)
  double raw_top1 = 0.0;  // current weights
  double ema_top1 = 0.0;
  std::vector<EvalRow> rows;
};

/// ema <- rate * ema + (1 - rate) * current, for parameters and BN buffers.
void ema_update(diffnet::Model& ema, const diffnet::Model& current, double rate);

/// Trains a fresh student on `set` with on-the-fly teacher soft labels.
StudentResult train_student(const recover::SyntheticSet& set, const diffnet::Model& teacher,
                            const dataio::RawDataset& test, const StudentConfig& cfg);

/// run_id, epoch, lr_multiplier, train_loss, test_top1, ema_test_top1, wall_ms
std::string eval_csv(const std::string& run_id, const std::vector<EvalRow>& rows);

} // namespace e2d::evaluate

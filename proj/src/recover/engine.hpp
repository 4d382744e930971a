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
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "common/rng.hpp"
#include "diffnet/adamw.hpp"
#include "diffnet/model.hpp"
#include "recover/buffer.hpp"
#include "recover/crops.hpp"
#include "recover/synthetic.hpp"

namespace e2d::recover {

enum class Variant { E2D, Random, ExploitOnly, Alternating, GradCam };
enum class Phase { Explore, Exploit };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);
const char* phase_name(Phase p);

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct RecoverConfig {
  int iterations = 200;          // T
  int explore_iterations = 140;  // K
  double epsilon = 0.5;
  double alpha_bn = 0.1;
  double lr = 0.05;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double weight_decay = 0.0;
  int ipc = 10;
  int batch_size = 0;  // images per optimizer batch within a class; 0 = whole class
  CropRange crops;
  int buffer_capacity = kDefaultBufferCapacity;
  Variant variant = Variant::E2D;
  int alternate_period = 20;
  int workers = 1;
  std::uint64_t seed = 0;
  int snapshot_stride = 10;  // 0 disables snapshots
};

/// Throws ErrorKind::Config on violated invariants.
void validate(const RecoverConfig& cfg);

/// Phase of step t (1-based).
Phase variant_schedule(const RecoverConfig& cfg, int t);

struct DistillLoss {
  diffnet::Var total;
  double ce = 0.0;
  double bn = 0.0;
  std::vector<double> per_image_ce;
};

/// mean CE(teacher(crops), labels) + alpha_bn * sum over BN layers of
/// ||mu - mu_BN||^2 + ||var - var_BN||^2, with batch moments of the crops.
/// A single crop with alpha_bn > 0 is rejected unless `allow_singleton`.
DistillLoss distillation_loss(diffnet::Graph& g, diffnet::Var crops, std::span<const int> labels,
                              const diffnet::Model& teacher, double alpha_bn, bool allow_singleton = false);

struct MetricRow {
  int cls = 0;
  int step = 0;
  Phase phase = Phase::Explore;
  double mean_ce = 0.0;
  double bn_align = 0.0;
  double total_loss = 0.0;
  long resident_records = 0;
  int frozen_images = 0;
  double wall_ms = 0.0;
};

struct BufferCounters {
  long insertions = 0;
  long updates = 0;    // exploration re-offers of a resident crop
  long refreshes = 0;  // exploitation re-evaluations above epsilon
  long capacity_evictions = 0;
  long threshold_evictions = 0;
  long rejected = 0;
  long crop_fallbacks = 0;
};

struct ImageState {
  MemoryBuffer buffer;
  bool frozen = false;
};

/// Buffer side of one exploration step: image members[k] with loss
/// losses[k] > epsilon offers `crop` to its buffer.
void record_exploration(std::span<ImageState> states, std::span<const int> members, const CropSpec& crop,
                        std::span<const double> losses, double epsilon, int step, BufferCounters& counters);

/// Synthesis state of one class. Steps mutate the class's images in place.
class ClassShard {
 public:
  ClassShard(const diffnet::Model& teacher, const RecoverConfig& cfg, int cls, std::span<diffnet::Tensor> images,
             std::vector<float> lo, std::vector<float> hi);

  /// Shared crop per batch; buffers record crops with CE > epsilon; pixels
  /// move only when `update_pixels`.
  MetricRow explore_step(int t, bool update_pixels = true);
  /// Per-image crops drawn from the buffers. With `freeze_empty`, images
  /// whose buffer is empty are frozen for good; otherwise they idle.
  MetricRow exploit_step(int t, bool freeze_empty = true);
  /// Per-image crops centered away from GradCAM activation.
  MetricRow gradcam_step(int t);

  bool all_frozen() const;
  /// Freezes every image with an empty buffer; true when all are frozen.
  bool freeze_empty();

  std::span<const ImageState> states() const noexcept { return states_; }
  const BufferCounters& counters() const noexcept { return counters_; }
  long resident_records() const;
  int frozen_count() const;
  Rng& rng() noexcept { return rng_; }

 private:
  struct Batch {
    double ce_sum = 0.0;
    double bn = 0.0;
    double total = 0.0;
    int chunks = 0;
    int images = 0;
  };
  std::vector<std::vector<int>> chunks(const std::vector<int>& members) const;
  // Per-image CE -> which members take a pixel step.
  using Decide = std::function<std::vector<int>(const std::vector<double>&)>;
  // One forward of `members` with one crop each, then an AdamW step on the
  // members selected by `decide`.
  void forward_chunk(std::span<const int> members, std::span<const CropSpec> crops, bool may_update,
                     const Decide& decide, Batch& acc);
  MetricRow row(int t, Phase phase, const Batch& acc) const;
  void clip(diffnet::Tensor& image) const;

  const diffnet::Model& teacher_;
  const RecoverConfig& cfg_;
  int cls_;
  std::span<diffnet::Tensor> images_;
  std::vector<float> lo_, hi_;
  std::vector<ImageState> states_;
  diffnet::AdamW opt_;
  Rng rng_;
  BufferCounters counters_;
};

struct ShardReport {
  int cls = 0;
  int stop_step = 0;  // last executed step
  int explore_steps = 0;
  int exploit_steps = 0;
  bool early_stopped = false;
  BufferCounters counters;
};

/// Called at step 0, every snapshot_stride steps and at T with the class's
/// current images. After an early stop the remaining scheduled steps are
/// reported with the frozen images. Runs on worker threads.
using SnapshotFn = std::function<void(int cls, int step, std::span<const diffnet::Tensor> images)>;

/// Called after every executed step with the shard's state (tests and
/// invariant probes). Runs on worker threads.
using StepObserver = std::function<void(const ClassShard& shard, const MetricRow& row)>;

struct RecoverResult {
  SyntheticSet set;
  std::vector<MetricRow> rows;  // ordered by class, then step
  std::vector<ShardReport> shards;
  int stop_step = 0;  // max over shards
};

/// Runs the configured variant on every class of `init`, one independent
/// shard per class with RNG derive_seed(cfg.seed, "recover", class).
RecoverResult run_recover(const SyntheticSet& init, const diffnet::Model& teacher, const RecoverConfig& cfg,
                          const SnapshotFn& on_snapshot = {}, const StepObserver& observer = {});

/// Snapshot steps: 0, stride, 2*stride, ..., and T.
std::vector<int> snapshot_steps(int iterations, int stride);

/// run_id, class, step, phase, mean_ce, bn_align, total_loss, resident_records,
/// frozen_images, wall_ms
std::string metric_csv(const std::string& run_id, const std::vector<MetricRow>& rows);

} // namespace e2d::recover

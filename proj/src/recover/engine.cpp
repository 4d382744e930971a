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

#include "recover/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include <fmt/format.h>

#include "common/csv.hpp"
#include "common/error.hpp"
#include "diffnet/ops.hpp"

namespace e2d::recover {

using diffnet::Graph;
using diffnet::Tensor;
using diffnet::Var;

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::E2D: return "e2d";
    case Variant::Random: return "random";
    case Variant::ExploitOnly: return "exploit-only";
    case Variant::Alternating: return "alternating";
    case Variant::GradCam: return "gradcam";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::E2D, Variant::Random, Variant::ExploitOnly, Variant::Alternating, Variant::GradCam}) {
    if (name == variant_name(v)) return v;
  }
  fail(ErrorKind::Config, "unknown variant '" + name + "' (expected e2d, random, exploit-only, alternating, gradcam)");
}

const char* phase_name(Phase p) { return p == Phase::Explore ? "explore" : "exploit"; }

void validate(const RecoverConfig& cfg) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, "recover." + msg); };
  check(cfg.iterations >= 0, "iterations must be non-negative");
  if (cfg.iterations > 0) {
    check(cfg.explore_iterations > 0 && cfg.explore_iterations < cfg.iterations,
          "explore_iterations must satisfy 0 < recover.explore_iterations < recover.iterations (got " +
              std::to_string(cfg.explore_iterations) + " and " + std::to_string(cfg.iterations) + ")");
  }
  check(cfg.epsilon >= 0.0, "epsilon must be >= 0");
  check(cfg.alpha_bn >= 0.0 && std::isfinite(cfg.alpha_bn), "alpha_bn must be finite and >= 0");
  check(cfg.lr > 0.0 && std::isfinite(cfg.lr), "lr must be positive");
  check(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0, "beta1/beta2 must lie in [0, 1)");
  check(cfg.weight_decay >= 0.0, "weight_decay must be >= 0");
  check(cfg.ipc >= 1, "ipc must be >= 1");
  check(cfg.batch_size >= 0, "batch_size must be >= 0");
  check(cfg.crops.scale_lo > 0.0 && cfg.crops.scale_lo <= cfg.crops.scale_hi && cfg.crops.scale_hi <= 1.0,
        "scale range must satisfy 0 < scale_min <= scale_max <= 1");
  check(cfg.crops.aspect_lo > 0.0 && cfg.crops.aspect_lo <= cfg.crops.aspect_hi, "aspect range must satisfy 0 < aspect_min <= aspect_max");
  check(cfg.buffer_capacity >= 1, "buffer_capacity must be >= 1");
  check(cfg.alternate_period >= 1, "alternate_period must be >= 1");
  check(cfg.workers >= 1, "workers must be >= 1");
  check(cfg.snapshot_stride >= 0, "snapshot_stride must be >= 0");
  if (cfg.alpha_bn > 0.0) {
    const int batch = cfg.batch_size == 0 ? cfg.ipc : std::min(cfg.batch_size, cfg.ipc);
    const int tail = cfg.ipc % batch;
    check(batch > 1 && tail != 1, "batch_size must give batches of more than one image when recover.alpha_bn > 0");
  }
}

Phase variant_schedule(const RecoverConfig& cfg, int t) {
  switch (cfg.variant) {
    case Variant::E2D:
    case Variant::ExploitOnly: return t <= cfg.explore_iterations ? Phase::Explore : Phase::Exploit;
    case Variant::Random:
    case Variant::GradCam: return Phase::Explore;
    case Variant::Alternating: return ((t - 1) / cfg.alternate_period) % 2 == 0 ? Phase::Explore : Phase::Exploit;
  }
  fail(ErrorKind::Config, "unknown variant");
}

DistillLoss distillation_loss(Graph& g, Var crops, std::span<const int> labels, const diffnet::Model& teacher,
                              double alpha_bn, bool allow_singleton) {
  const int n = g.value(crops).dim(0);
  require(allow_singleton || alpha_bn == 0.0 || n > 1, ErrorKind::InvalidArgument,
          "BN alignment needs a batch of at least two crops");
  diffnet::ForwardResult fr = teacher.forward(g, crops, diffnet::BnMode::Capture);
  DistillLoss out;
  Var ce = diffnet::cross_entropy(g, fr.logits, labels, &out.per_image_ce);
  out.ce = g.value(ce)[0];
  std::vector<Var> terms = {ce};
  std::vector<double> weights = {1.0};
  const diffnet::BNStats& bn = teacher.bn_stats();
  for (std::size_t l = 0; l < fr.bn_means.size(); ++l) {
    Var dm = diffnet::squared_distance(g, fr.bn_means[l], bn.mean[l]);
    Var dv = diffnet::squared_distance(g, fr.bn_vars[l], bn.var[l]);
    out.bn += static_cast<double>(g.value(dm)[0]) + g.value(dv)[0];
    if (alpha_bn > 0.0) {
      terms.insert(terms.end(), {dm, dv});
      weights.insert(weights.end(), {alpha_bn, alpha_bn});
    }
  }
  out.total = diffnet::weighted_sum(g, terms, weights);
  return out;
}

void record_exploration(std::span<ImageState> states, std::span<const int> members, const CropSpec& crop,
                        std::span<const double> losses, double epsilon, int step, BufferCounters& counters) {
  require(members.size() == losses.size(), ErrorKind::InvalidArgument, "one loss per member expected");
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (!(losses[k] > epsilon)) continue;
    switch (states[static_cast<std::size_t>(members[k])].buffer.offer(crop, losses[k], step)) {
      case MemoryBuffer::Offer::Added: ++counters.insertions; break;
      case MemoryBuffer::Offer::Updated: ++counters.updates; break;
      case MemoryBuffer::Offer::Replaced:
        ++counters.insertions;
        ++counters.capacity_evictions;
        break;
      case MemoryBuffer::Offer::Rejected: ++counters.rejected; break;
    }
  }
}

ClassShard::ClassShard(const diffnet::Model& teacher, const RecoverConfig& cfg, int cls, std::span<Tensor> images,
                       std::vector<float> lo, std::vector<float> hi)
    : teacher_(teacher),
      cfg_(cfg),
      cls_(cls),
      images_(images),
      lo_(std::move(lo)),
      hi_(std::move(hi)),
      opt_({cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}),
      rng_(derive_seed(cfg.seed, "recover", static_cast<std::uint64_t>(cls))) {
  states_.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) states_.push_back({MemoryBuffer(cfg.buffer_capacity), false});
}

std::vector<std::vector<int>> ClassShard::chunks(const std::vector<int>& members) const {
  const std::size_t size = cfg_.batch_size == 0 ? members.size() : static_cast<std::size_t>(cfg_.batch_size);
  std::vector<std::vector<int>> out;
  for (std::size_t lo = 0; lo < members.size(); lo += size) {
    out.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(lo),
                     members.begin() + static_cast<std::ptrdiff_t>(std::min(members.size(), lo + size)));
  }
  return out;
}

void ClassShard::clip(Tensor& image) const {
  const std::size_t plane = static_cast<std::size_t>(image.dim(2)) * image.dim(3);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const std::size_t c = i / plane;
    image[i] = std::clamp(image[i], lo_[c], hi_[c]);
  }
}

void ClassShard::forward_chunk(std::span<const int> members, std::span<const CropSpec> crops, bool may_update,
                               const Decide& decide, Batch& acc) {
  Graph g;
  std::vector<Tensor> grads;
  grads.reserve(members.size());
  std::vector<Var> views;
  for (std::size_t k = 0; k < members.size(); ++k) {
    Tensor& image = images_[static_cast<std::size_t>(members[k])];
    grads.emplace_back(image.shape(), 0.0f);
    Var v = g.external(image, may_update ? &grads.back() : nullptr);
    views.push_back(diffnet::crop_resize(g, v, crops[k]));
  }
  Var batch = views.size() == 1 ? views[0] : diffnet::concat_batch(g, views);
  const std::vector<int> labels(members.size(), cls_);
  DistillLoss dl = distillation_loss(g, batch, labels, teacher_, cfg_.alpha_bn, true);
  acc.ce_sum += dl.ce * static_cast<double>(members.size());
  acc.bn += dl.bn;
  acc.total += g.value(dl.total)[0];
  acc.chunks += 1;
  acc.images += static_cast<int>(members.size());
  const std::vector<int> mask = decide(dl.per_image_ce);
  if (!may_update || std::none_of(mask.begin(), mask.end(), [](int m) { return m != 0; })) return;
  g.backward(dl.total);
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (mask[k] == 0) continue;
    Tensor& image = images_[static_cast<std::size_t>(members[k])];
    opt_.update(static_cast<std::size_t>(members[k]), image, grads[k]);
    clip(image);
  }
}

MetricRow ClassShard::row(int t, Phase phase, const Batch& acc) const {
  MetricRow r;
  r.cls = cls_;
  r.step = t;
  r.phase = phase;
  if (acc.chunks > 0) {
    r.mean_ce = acc.ce_sum / acc.images;
    r.bn_align = acc.bn / acc.chunks;
    r.total_loss = acc.total / acc.chunks;
  }
  r.resident_records = resident_records();
  r.frozen_images = frozen_count();
  return r;
}

MetricRow ClassShard::explore_step(int t, bool update_pixels) {
  const double epsilon = cfg_.variant == Variant::Random ? kInfinity : cfg_.epsilon;
  std::vector<int> members(images_.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = static_cast<int>(i);
  Batch acc;
  for (const std::vector<int>& chunk : chunks(members)) {
    const CropSpec crop = sample_rrc(rng_, images_[0].dim(2), images_[0].dim(3), cfg_.crops, &counters_.crop_fallbacks);
    const std::vector<CropSpec> crops(chunk.size(), crop);
    forward_chunk(chunk, crops, update_pixels,
                  [&](const std::vector<double>& losses) {
                    record_exploration(states_, chunk, crop, losses, epsilon, t, counters_);
                    return std::vector<int>(chunk.size(), 1);
                  },
                  acc);
  }
  return row(t, Phase::Explore, acc);
}

bool ClassShard::freeze_empty() {
  for (ImageState& s : states_) {
    if (s.buffer.empty()) s.frozen = true;
  }
  return all_frozen();
}

MetricRow ClassShard::exploit_step(int t, bool freeze) {
  if (freeze) freeze_empty();
  std::vector<int> active;
  for (std::size_t i = 0; i < states_.size(); ++i) {
    if (!states_[i].frozen && !states_[i].buffer.empty()) active.push_back(static_cast<int>(i));
  }
  Batch acc;
  for (const std::vector<int>& chunk : chunks(active)) {
    std::vector<std::size_t> picks;
    std::vector<CropSpec> crops;
    for (int i : chunk) {
      const MemoryBuffer& buf = states_[static_cast<std::size_t>(i)].buffer;
      picks.push_back(exploit_sample(buf, rng_));
      crops.push_back(buf.records()[picks.back()].crop);
    }
    // Buffers are reconciled with l'_i before the update, so an image whose
    // buffer has just emptied takes no further step.
    forward_chunk(chunk, crops, true,
                  [&](const std::vector<double>& losses) {
                    std::vector<int> mask(chunk.size(), 0);
                    for (std::size_t k = 0; k < chunk.size(); ++k) {
                      ImageState& s = states_[static_cast<std::size_t>(chunk[k])];
                      if (s.buffer.refresh(picks[k], losses[k], cfg_.epsilon)) {
                        ++counters_.refreshes;
                      } else {
                        ++counters_.threshold_evictions;
                      }
                      if (s.buffer.empty()) {
                        if (freeze) s.frozen = true;
                      } else {
                        mask[k] = 1;
                      }
                    }
                    return mask;
                  },
                  acc);
  }
  return row(t, Phase::Exploit, acc);
}

MetricRow ClassShard::gradcam_step(int t) {
  std::vector<int> members(images_.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = static_cast<int>(i);
  Batch acc;
  for (const std::vector<int>& chunk : chunks(members)) {
    std::vector<CropSpec> crops;
    for (int i : chunk) {
      const Tensor map = gradcam_map(teacher_, images_[static_cast<std::size_t>(i)], cls_);
      crops.push_back(sample_inverse_activation(rng_, map, cfg_.crops, &counters_.crop_fallbacks));
    }
    forward_chunk(chunk, crops, true, [&](const std::vector<double>&) { return std::vector<int>(chunk.size(), 1); },
                  acc);
  }
  return row(t, Phase::Explore, acc);
}

bool ClassShard::all_frozen() const {
  return std::all_of(states_.begin(), states_.end(), [](const ImageState& s) { return s.frozen; });
}

long ClassShard::resident_records() const {
  long n = 0;
  for (const ImageState& s : states_) n += static_cast<long>(s.buffer.size());
  return n;
}

int ClassShard::frozen_count() const {
  int n = 0;
  for (const ImageState& s : states_) n += s.frozen ? 1 : 0;
  return n;
}

std::vector<int> snapshot_steps(int iterations, int stride) {
  std::vector<int> steps = {0};
  if (stride > 0) {
    for (int t = stride; t < iterations; t += stride) steps.push_back(t);
  }
  if (iterations > 0) steps.push_back(iterations);
  return steps;
}

namespace {

struct ShardOutput {
  ShardReport report;
  std::vector<MetricRow> rows;
};

ShardOutput run_shard(const diffnet::Model& teacher, const RecoverConfig& cfg, int cls, std::span<Tensor> images,
                      const std::vector<float>& lo, const std::vector<float>& hi, const SnapshotFn& on_snapshot,
                      const StepObserver& observer) {
  ShardOutput out;
  out.report.cls = cls;
  ClassShard shard(teacher, cfg, cls, images, lo, hi);
  const std::vector<int> snaps = snapshot_steps(cfg.iterations, cfg.snapshot_stride);
  std::size_t next_snap = 0;
  auto snapshot_through = [&](int t) {
    while (next_snap < snaps.size() && snaps[next_snap] <= t) {
      if (on_snapshot) on_snapshot(cls, snaps[next_snap], images);
      ++next_snap;
    }
  };
  snapshot_through(0);
  const bool stops_early = cfg.variant == Variant::E2D || cfg.variant == Variant::ExploitOnly;
  const auto start = std::chrono::steady_clock::now();

  for (int t = 1; t <= cfg.iterations; ++t) {
    const Phase phase = variant_schedule(cfg, t);
    MetricRow row;
    try {
      if (phase == Phase::Explore) {
        if (cfg.variant == Variant::GradCam) {
          row = shard.gradcam_step(t);
        } else {
          row = shard.explore_step(t, cfg.variant != Variant::ExploitOnly);
        }
        ++out.report.explore_steps;
      } else {
        if (stops_early && shard.freeze_empty()) {
          out.report.early_stopped = true;
          break;
        }
        row = shard.exploit_step(t, stops_early);
        ++out.report.exploit_steps;
      }
    } catch (const Error& e) {
      fail(ErrorKind::Stage, "recover: class " + std::to_string(cls) + " step " + std::to_string(t) + ": " + e.what());
    }
    for (const ImageState& s : shard.states()) {
      for (const CropRecord& r : s.buffer.records()) {
        require(r.loss > cfg.epsilon, ErrorKind::Stage, "recover: resident record at or below epsilon");
      }
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.rows.push_back(row);
    out.report.stop_step = t;
    if (observer) observer(shard, row);
    snapshot_through(t);
    if (stops_early && phase == Phase::Exploit && shard.all_frozen()) {
      out.report.early_stopped = t < cfg.iterations;
      break;
    }
  }
  snapshot_through(cfg.iterations);
  out.report.counters = shard.counters();
  return out;
}

} // namespace

RecoverResult run_recover(const SyntheticSet& init, const diffnet::Model& teacher, const RecoverConfig& cfg,
                          const SnapshotFn& on_snapshot, const StepObserver& observer) {
  validate(cfg);
  validate(init);
  require(init.ipc == cfg.ipc, ErrorKind::Config,
          "recover.ipc (" + std::to_string(cfg.ipc) + ") does not match the initial set (" + std::to_string(init.ipc) + ")");
  require(teacher.num_classes() == init.num_classes, ErrorKind::Config, "teacher and synthetic set disagree on the class count");
  require(teacher.input_shape() == diffnet::InputShape{init.channels, init.height, init.width}, ErrorKind::Config,
          "teacher input shape does not match the synthetic images");

  RecoverResult res;
  res.set = init;
  auto [lo, hi] = dataio::normalized_bounds(init.norm);
  const int classes = init.num_classes;
  std::vector<ShardOutput> outputs(static_cast<std::size_t>(classes));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(classes));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int c = next++; c < classes; c = next++) {
      try {
        std::span<Tensor> images(res.set.images.data() + static_cast<std::size_t>(c) * init.ipc,
                                 static_cast<std::size_t>(init.ipc));
        outputs[static_cast<std::size_t>(c)] = run_shard(teacher, cfg, c, images, lo, hi, on_snapshot, observer);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min(cfg.workers, classes));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (ShardOutput& o : outputs) {
    res.stop_step = std::max(res.stop_step, o.report.stop_step);
    res.shards.push_back(o.report);
    res.rows.insert(res.rows.end(), o.rows.begin(), o.rows.end());
  }
  res.set.step = res.stop_step;
  validate(res.set);
  return res;
}

std::string metric_csv(const std::string& run_id, const std::vector<MetricRow>& rows) {
  std::string out =
      "run_id,class,step,phase,mean_ce,bn_align,total_loss,resident_records,frozen_images,wall_ms\n";
  for (const MetricRow& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", csv::field(run_id), r.cls, r.step, phase_name(r.phase),
                       csv::number(r.mean_ce), csv::number(r.bn_align), csv::number(r.total_loss), r.resident_records,
                       r.frozen_images, csv::number(r.wall_ms));
  }
  return out;
}

} // namespace e2d::recover

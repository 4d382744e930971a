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

#include "evaluate/student.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "common/csv.hpp"
#include "common/error.hpp"
#include "diffnet/adamw.hpp"
#include "diffnet/ops.hpp"
#include "squeeze/teacher.hpp"

namespace e2d::evaluate {

using diffnet::Graph;
using diffnet::Tensor;
using diffnet::Var;

double ssrs_lr(long i, long n, double zeta) {
  require(n >= 6 && zeta > 0.0, ErrorKind::InvalidArgument, "ssrs needs n >= 6 and zeta > 0");
  require(i >= 0 && i <= n, ErrorKind::InvalidArgument, "ssrs iteration out of range");
  const double id = static_cast<double>(i), nd = static_cast<double>(n);
  if (6 * i <= 5 * n) return (1.0 + std::cos(id * M_PI / (zeta * nd))) / 2.0;
  return (1.0 + std::cos(5.0 * M_PI / (6.0 * zeta))) / 2.0 * (6.0 * nd - 6.0 * id) / (6.0 * nd);
}

double cosine_multiplier(long i, long n) {
  if (n <= 0) return 1.0;
  return (1.0 + std::cos(M_PI * static_cast<double>(i) / static_cast<double>(n))) / 2.0;
}

double multistep_multiplier(long i, long n) {
  if (4 * i >= 3 * n) return 0.01;
  if (2 * i >= n) return 0.1;
  return 1.0;
}

const char* schedule_name(Schedule s) {
  switch (s) {
    case Schedule::Ssrs: return "ssrs";
    case Schedule::Cosine: return "cosine";
    case Schedule::MultiStep: return "multistep";
  }
  return "?";
}

Schedule parse_schedule(const std::string& name) {
  for (Schedule s : {Schedule::Ssrs, Schedule::Cosine, Schedule::MultiStep}) {
    if (name == schedule_name(s)) return s;
  }
  fail(ErrorKind::Config, "unknown schedule '" + name + "' (expected ssrs, cosine, multistep)");
}

const char* soft_loss_name(SoftLoss l) { return l == SoftLoss::Kl ? "kl" : "mse-gt-plus-ce"; }

SoftLoss parse_soft_loss(const std::string& name) {
  if (name == "kl") return SoftLoss::Kl;
  if (name == "mse-gt-plus-ce") return SoftLoss::MseGtPlusCe;
  fail(ErrorKind::Config, "unknown loss '" + name + "' (expected kl, mse-gt-plus-ce)");
}

void validate(const StudentConfig& cfg) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, "eval." + msg); };
  check(cfg.width >= 0, "width must be >= 0");
  check(cfg.epochs >= 0, "epochs must be >= 0");
  check(cfg.batch_size >= 1, "batch_size must be >= 1");
  check(cfg.lr > 0.0, "lr must be positive");
  check(cfg.weight_decay >= 0.0, "weight_decay must be >= 0");
  check(cfg.ce_weight >= 0.0, "ce_weight must be >= 0");
  check(cfg.ema_rate >= 0.0 && cfg.ema_rate < 1.0, "ema_rate must lie in [0, 1)");
  check(cfg.flip_prob >= 0.0 && cfg.flip_prob <= 1.0, "flip_prob must lie in [0, 1]");
  check(cfg.cutmix_alpha > 0.0, "cutmix_alpha must be positive");
  check(cfg.cutmix_prob >= 0.0 && cfg.cutmix_prob <= 1.0, "cutmix_prob must lie in [0, 1]");
  check(cfg.zeta > 0.0, "zeta must be positive");
  check(cfg.test_every >= 1, "test_every must be >= 1");
  check(cfg.crops.scale_lo > 0.0 && cfg.crops.scale_lo <= cfg.crops.scale_hi && cfg.crops.scale_hi <= 1.0,
        "scale range must satisfy 0 < scale_min <= scale_max <= 1");
  check(cfg.crops.aspect_lo > 0.0 && cfg.crops.aspect_lo <= cfg.crops.aspect_hi, "aspect range must satisfy 0 < aspect_min <= aspect_max");
}

double lr_multiplier(const StudentConfig& cfg, long i, long n) {
  switch (cfg.schedule) {
    case Schedule::Ssrs: return ssrs_lr(i, n, cfg.zeta);
    case Schedule::Cosine: return cosine_multiplier(i, n);
    case Schedule::MultiStep: return multistep_multiplier(i, n);
  }
  return 1.0;
}

CutMixResult apply_cutmix(const Tensor& images, const Tensor& labels, const diffnet::CropSpec& box,
                          std::span<const int> partner) {
  require(images.rank() == 4 && labels.rank() == 2 && images.dim(0) == labels.dim(0), ErrorKind::Shape,
          "cutmix expects (N, C, H, W) images and (N, L) labels");
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3), l = labels.dim(1);
  require(static_cast<int>(partner.size()) == n, ErrorKind::InvalidArgument, "cutmix needs one partner per image");
  require(box.top >= 0 && box.left >= 0 && box.height >= 0 && box.width >= 0 && box.top + box.height <= h &&
              box.left + box.width <= w,
          ErrorKind::InvalidArgument, "cutmix box outside the image");
  CutMixResult out{images, labels, 1.0, box};
  const int area = box.height * box.width;
  out.lambda = 1.0 - static_cast<double>(area) / (static_cast<double>(h) * w);
  if (area == 0) return out;
  for (int i = 0; i < n; ++i) {
    const int j = partner[static_cast<std::size_t>(i)];
    require(j >= 0 && j < n, ErrorKind::InvalidArgument, "cutmix partner out of range");
    for (int ch = 0; ch < c; ++ch)
      for (int y = box.top; y < box.top + box.height; ++y)
        for (int x = box.left; x < box.left + box.width; ++x) out.images.at(i, ch, y, x) = images.at(j, ch, y, x);
    for (int k = 0; k < l; ++k) {
      const std::size_t a = static_cast<std::size_t>(i * l + k), b = static_cast<std::size_t>(j * l + k);
      out.labels[a] = static_cast<float>(out.lambda * labels[a] + (1.0 - out.lambda) * labels[b]);
    }
  }
  return out;
}

CutMixResult cutmix_with_lambda(const Tensor& images, const Tensor& labels, double lambda, Rng& rng) {
  require(images.rank() == 4 && labels.rank() == 2 && images.dim(0) == labels.dim(0), ErrorKind::Shape,
          "cutmix expects (N, C, H, W) images and (N, L) labels");
  const int n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (n < 2) return {images, labels, 1.0, {}};
  std::vector<int> partner(static_cast<std::size_t>(n));
  std::iota(partner.begin(), partner.end(), 0);
  std::shuffle(partner.begin(), partner.end(), rng);
  const double cut = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const int cut_h = static_cast<int>(h * cut), cut_w = static_cast<int>(w * cut);
  const int cy = uniform_int(rng, 0, h - 1), cx = uniform_int(rng, 0, w - 1);
  const int y0 = std::clamp(cy - cut_h / 2, 0, h), y1 = std::clamp(cy + cut_h / 2, 0, h);
  const int x0 = std::clamp(cx - cut_w / 2, 0, w), x1 = std::clamp(cx + cut_w / 2, 0, w);
  return apply_cutmix(images, labels, {y0, x0, y1 - y0, x1 - x0, y1 - y0, x1 - x0}, partner);
}

double sample_beta(Rng& rng, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng), b = gamma(rng);
  return a + b > 0.0 ? a / (a + b) : 0.5;
}

CutMixResult cutmix(const Tensor& images, const Tensor& labels, double alpha, Rng& rng) {
  if (images.dim(0) < 2) return {images, labels, 1.0, {}};
  return cutmix_with_lambda(images, labels, sample_beta(rng, alpha), rng);
}

Var soft_label_loss(Graph& g, Var student_logits, const Tensor& teacher_logits, const Tensor* targets, SoftLoss mode,
                    double ce_weight) {
  require(g.value(student_logits).same_shape(teacher_logits), ErrorKind::Shape, "student and teacher logits differ in shape");
  if (mode == SoftLoss::Kl) return diffnet::kl_divergence(g, student_logits, teacher_logits);
  require(targets != nullptr && targets->same_shape(teacher_logits), ErrorKind::InvalidArgument,
          "mse-gt-plus-ce needs label distributions shaped like the logits");
  Var mse = diffnet::mean_squared_error(g, student_logits, teacher_logits);
  Var ce = diffnet::cross_entropy_soft(g, student_logits, *targets);
  const Var terms[] = {mse, ce};
  const double weights[] = {1.0, ce_weight};
  return diffnet::weighted_sum(g, terms, weights);
}

void ema_update(diffnet::Model& ema, const diffnet::Model& current, double rate) {
  auto blend = [rate](Tensor& e, const Tensor& c) {
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(rate * e[i] + (1.0 - rate) * c[i]);
  };
  for (std::size_t p = 0; p < ema.parameters().size(); ++p) blend(ema.parameters()[p].value, current.parameters()[p].value);
  for (std::size_t l = 0; l < ema.bn_stats().mean.size(); ++l) {
    blend(ema.bn_stats().mean[l], current.bn_stats().mean[l]);
    blend(ema.bn_stats().var[l], current.bn_stats().var[l]);
  }
}

namespace {

Tensor augment(const Tensor& image, const StudentConfig& cfg, Rng& rng) {
  const int h = image.dim(2), w = image.dim(3);
  Tensor out = diffnet::crop_resize(image, recover::sample_rrc(rng, h, w, cfg.crops));
  if (uniform01(rng) < cfg.flip_prob) {
    for (int c = 0; c < out.dim(1); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) std::swap(out.at(0, c, y, x), out.at(0, c, y, w - 1 - x));
  }
  return out;
}

} // namespace

StudentResult train_student(const recover::SyntheticSet& set, const diffnet::Model& teacher,
                            const dataio::RawDataset& test, const StudentConfig& cfg) {
  validate(cfg);
  recover::validate(set);
  require(set.count() > 0, ErrorKind::InvalidArgument, "cannot train a student on an empty synthetic set");
  require(set.norm.mean == test.norm.mean && set.norm.std == test.norm.std, ErrorKind::Config,
          "synthetic set and test split use different normalization constants");
  require(teacher.num_classes() == set.num_classes, ErrorKind::Config, "teacher and synthetic set disagree on the class count");

  Rng rng(derive_seed(cfg.seed, "eval"));
  const int width = cfg.width > 0 ? cfg.width : teacher.feature_width();
  StudentResult res;
  res.student = diffnet::Model::convnet({set.channels, set.height, set.width}, set.num_classes, width);
  res.student.initialize(rng);
  res.ema = res.student;
  diffnet::AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const long per_epoch = static_cast<long>((set.count() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  require(cfg.schedule != Schedule::Ssrs || total == 0 || total >= 6, ErrorKind::Config,
          "eval: ssrs needs at least 6 iterations (epochs x batches)");
  std::vector<int> order(set.count());
  std::iota(order.begin(), order.end(), 0);
  const auto start = std::chrono::steady_clock::now();
  long it = 0;
  double mult = total > 0 ? lr_multiplier(cfg, 0, total) : 1.0;

  auto evaluate_row = [&](int epoch, double train_loss) {
    EvalRow r;
    r.epoch = epoch;
    r.lr_multiplier = mult;
    r.train_loss = train_loss;
    r.test_top1 = squeeze::evaluate_model(res.student, test);
    r.ema_test_top1 = cfg.ema_rate > 0.0 ? squeeze::evaluate_model(res.ema, test) : r.test_top1;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.rows.push_back(r);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (long b = 0; b < per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t hi = std::min(set.count(), lo + cfg.batch_size);
      std::vector<Tensor> views;
      Tensor onehot({static_cast<int>(hi - lo), set.num_classes}, 0.0f);
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = static_cast<std::size_t>(order[k]);
        views.push_back(augment(set.images[idx], cfg, rng));
        onehot[(k - lo) * static_cast<std::size_t>(set.num_classes) + static_cast<std::size_t>(set.label(idx))] = 1.0f;
      }
      Tensor x = diffnet::stack_batch(views);
      Tensor targets = onehot;
      if (uniform01(rng) < cfg.cutmix_prob) {
        CutMixResult mixed = cutmix(x, onehot, cfg.cutmix_alpha, rng);
        x = std::move(mixed.images);
        targets = std::move(mixed.labels);
      }
      const Tensor teacher_logits = teacher.predict(x);

      mult = lr_multiplier(cfg, it, total);
      opt.set_lr(cfg.lr * mult);
      res.student.zero_grad();
      try {
        Graph g;
        diffnet::ForwardResult fr = res.student.forward_train(g, g.input(std::move(x)));
        Var loss = soft_label_loss(g, fr.logits, teacher_logits, &targets, cfg.loss, cfg.ce_weight);
        loss_sum += g.value(loss)[0];
        g.backward(loss);
      } catch (const Error& e) {
        fail(ErrorKind::Stage, fmt::format("eval: epoch {} iteration {}: {}", epoch, it, e.what()));
      }
      opt.step(res.student.parameters());
      require(res.student.parameters_finite(), ErrorKind::Stage, fmt::format("eval: student diverged at iteration {}", it));
      ema_update(res.ema, res.student, cfg.ema_rate);
      ++it;
    }
    if (epoch % cfg.test_every == 0 || epoch == cfg.epochs) evaluate_row(epoch, loss_sum / static_cast<double>(per_epoch));
  }
  if (cfg.epochs == 0) evaluate_row(0, 0.0);
  res.raw_top1 = res.rows.back().test_top1;
  res.ema_top1 = res.rows.back().ema_test_top1;
  res.top1 = cfg.ema_rate > 0.0 ? res.ema_top1 : res.raw_top1;
  return res;
}

std::string eval_csv(const std::string& run_id, const std::vector<EvalRow>& rows) {
  std::string out = "run_id,epoch,lr_multiplier,train_loss,test_top1,ema_test_top1,wall_ms\n";
  for (const EvalRow& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{}\n", csv::field(run_id), r.epoch, csv::number(r.lr_multiplier),
                       csv::number(r.train_loss), csv::number(r.test_top1), csv::number(r.ema_test_top1),
                       csv::number(r.wall_ms));
  }
  return out;
}

} // namespace e2d::evaluate

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

#include "pipeline/run.hpp"

#include <chrono>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "common/binio.hpp"
#include "common/csv.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"
#include "diffnet/checkpoint.hpp"
#include "evaluate/student.hpp"
#include "recover/engine.hpp"
#include "recover/synthetic.hpp"
#include "squeeze/teacher.hpp"

namespace e2d::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  write_file(path.string(), std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json config_subset(const RunConfig& cfg, std::initializer_list<const char*> prefixes,
                   std::initializer_list<const char*> excluded = {}) {
  json out = json::object();
  const json all = config_json(cfg);
  for (const auto& [key, value] : all.items()) {
    bool keep = key == "seed";
    for (const char* p : prefixes) keep = keep || key.rfind(p, 0) == 0;
    for (const char* x : excluded) keep = keep && key != x;
    if (keep) out[key] = value;
  }
  return out;
}

std::string fingerprint(const std::string& stage, json config, json inputs) {
  const json doc = {{"stage", stage}, {"version", E2D_VERSION}, {"config", std::move(config)}, {"inputs", std::move(inputs)}};
  return sha256_hex(doc.dump());
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

} // namespace

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
      return kExitConfig;
    case ErrorKind::Fingerprint:
      return kExitFingerprint;
    default:
      return kExitStage;
  }
}

Run::Run(RunConfig cfg, RunOptions opts)
    : cfg_(std::move(cfg)), opts_(std::move(opts)), dir_(fs::path(opts_.runs_root) / opts_.run_id) {
  require(!opts_.run_id.empty() && opts_.run_id.find_first_of("/\\") == std::string::npos &&
              opts_.run_id != "." && opts_.run_id != "..",
          ErrorKind::Config, "run id '" + opts_.run_id + "' is not a valid directory name");
  validate(cfg_);
  fs::create_directories(dir_);
  manifest_ = Manifest::open(dir_ / kManifestFile, opts_.run_id);
}

fs::path Run::resolve(const std::string& given, const char* file) const {
  return given.empty() ? dir_ / file : fs::path(given);
}

fs::path Run::input(const std::string& given, const char* name, const char* file) const {
  fs::path path = resolve(given, file);
  require(fs::exists(path), ErrorKind::Io,
          fmt::format("missing {} '{}'; run the stage that produces it first", name, path.string()));
  return path;
}

const Run::Data& Run::data() {
  if (data_) return *data_;
  const DatasetConfig& dc = cfg_.dataset;
  auto path = [&](const std::string& p) {
    require(!p.empty(), ErrorKind::Config, "dataset: a required file path is empty");
    const fs::path fp(p);
    return (fp.is_absolute() ? fp : fs::path(cfg_.base_dir) / fp).string();
  };
  auto hash_all = [](const std::vector<std::string>& files) {
    std::string joined;
    for (const std::string& f : files) joined += sha256_file(f);
    return sha256_hex(joined);
  };
  Data d;
  std::vector<std::string> train_files, test_files;
  if (dc.format == "idx") {
    train_files = {path(dc.train_images), path(dc.train_labels)};
    test_files = {path(dc.test_images), path(dc.test_labels)};
    d.train = dataio::parse_idx_files(train_files[0], train_files[1]);
    d.test = dataio::parse_idx_files(test_files[0], test_files[1]);
  } else {
    for (const auto& f : dc.train_files) train_files.push_back(path(f));
    for (const auto& f : dc.test_files) test_files.push_back(path(f));
    require(!train_files.empty() && !test_files.empty(), ErrorKind::Config,
            "dataset.train_files and dataset.test_files are required for the cifar format");
    d.train = dataio::parse_cifar_files(train_files);
    d.test = dataio::parse_cifar_files(test_files);
  }
  for (dataio::RawDataset* ds : {&d.train, &d.test}) {
    require(static_cast<int>(dc.mean.size()) == ds->channels, ErrorKind::Config,
            fmt::format("dataset.mean has {} values but the images have {} channels", dc.mean.size(), ds->channels));
    require(ds->num_classes <= dc.classes, ErrorKind::Config,
            fmt::format("dataset.classes is {} but labels reach {}", dc.classes, ds->num_classes - 1));
    ds->num_classes = dc.classes;
    ds->norm = {dc.mean, dc.std};
    dataio::validate(*ds);
  }
  d.train_sha256 = hash_all(train_files);
  d.test_sha256 = hash_all(test_files);
  spdlog::info("dataset: {} train / {} test images, {}x{}x{}", d.train.count(), d.test.count(), d.train.channels,
               d.train.height, d.train.width);
  data_ = std::move(d);
  record_common();
  return *data_;
}

void Run::record_common() {
  json& j = manifest_.json();
  j["config"] = config_json(cfg_);
  j["config_dir"] = cfg_.base_dir;
  j["config_text"] = serialize_config(cfg_);
  j["seed"] = cfg_.seed;
  json per_class = json::object();
  for (const char* stage : {"init", "recover", "probe"}) {
    json seeds = json::array();
    for (int c = 0; c < cfg_.dataset.classes; ++c) {
      seeds.push_back(derive_seed(cfg_.seed, stage, static_cast<std::uint64_t>(c)));
    }
    per_class[stage] = seeds;
  }
  per_class["teacher"] = derive_seed(cfg_.seed, "teacher");
  per_class["eval"] = derive_seed(cfg_.seed, "eval");
  j["seeds"] = per_class;
  j["dataset"] = {{"format", cfg_.dataset.format},
                  {"train_sha256", data_->train_sha256},
                  {"test_sha256", data_->test_sha256},
                  {"train_count", data_->train.count()},
                  {"test_count", data_->test.count()}};
  j["deterministic"] = opts_.deterministic;
  j["notes"] = json::array({"bn alignment is computed on per-class batches"});
  manifest_.save();
}

bool Run::can_skip(const std::string& stage, const std::string& fp,
                   const std::vector<std::pair<std::string, fs::path>>& outputs) const {
  const json* st = manifest_.find_stage(stage);
  if (st == nullptr || st->value("status", "") != "ok" || st->value("fingerprint", "") != fp) return false;
  for (const auto& [name, path] : outputs) {
    const auto recorded = manifest_.artifact_path(name);
    if (!recorded || *recorded != fs::absolute(path).lexically_normal() || !fs::exists(path)) return false;
    const std::string actual = sha256_file(path);
    require(actual == *manifest_.artifact_hash(name), ErrorKind::Fingerprint,
            fmt::format("{}: sha256 mismatch (manifest {}, file {})", path.string(), *manifest_.artifact_hash(name),
                        actual));
  }
  return true;
}

template <typename Body>
StageOutcome Run::run_stage(const std::string& stage, const Body& body) {
  json& st = manifest_.stage(stage);
  st = {{"status", "running"}, {"started_at", utc_timestamp()}};
  manifest_.save();
  spdlog::info("{}: {} started", opts_.run_id, stage);
  const auto t0 = std::chrono::steady_clock::now();
  json info = json::object();
  std::string fp;
  try {
    fp = body(info);
  } catch (const std::exception& e) {
    json& failed = manifest_.stage(stage);
    failed["status"] = "failed";
    failed["error"] = e.what();
    failed["finished_at"] = utc_timestamp();
    failed["wall_ms"] = elapsed_ms(t0);
    manifest_.save();
    if (dynamic_cast<const Error*>(&e) != nullptr) throw;
    fail(ErrorKind::Stage, stage + ": " + e.what());
  }
  const double ms = elapsed_ms(t0);
  json& done = manifest_.stage(stage);
  done.update(info);
  done["status"] = "ok";
  done["fingerprint"] = fp;
  done["wall_ms"] = ms;
  done["finished_at"] = utc_timestamp();
  manifest_.json()["finished_at"] = done["finished_at"];
  manifest_.save();
  spdlog::info("{}: {} finished in {:.1f} s", opts_.run_id, stage, ms / 1000.0);
  return {stage, false, ms};
}

StageOutcome Run::squeeze(const StagePaths& paths) {
  const Data& d = data();
  const fs::path out = resolve(paths.out, kTeacherFile);
  const std::string fp = fingerprint("squeeze", config_subset(cfg_, {"dataset.", "teacher."}),
                                     {{"train", d.train_sha256}, {"test", d.test_sha256}});
  if (can_skip("squeeze", fp, {{"teacher", out}})) {
    spdlog::info("{}: squeeze up to date", opts_.run_id);
    return {"squeeze", true, 0.0};
  }
  return run_stage("squeeze", [&](json& info) {
    Rng rng(derive_seed(cfg_.seed, "teacher"));
    squeeze::TeacherResult r = squeeze::train_teacher(d.train, &d.test, cfg_.teacher, rng, [&](int epoch, double loss) {
      spdlog::info("teacher epoch {} loss {:.4f}", epoch, loss);
    });
    diffnet::save_checkpoint(out.string(), r.model, r.top1);
    manifest_.set_artifact("teacher", out);
    info["top1"] = r.top1;
    info["diverged"] = r.diverged;
    return fp;
  });
}

StageOutcome Run::recover(const StagePaths& paths) {
  const Data& d = data();
  const fs::path teacher_path = input(paths.teacher, "teacher", kTeacherFile);
  const std::string teacher_hash = manifest_.verify_input("teacher", teacher_path);
  const fs::path out = resolve(paths.out, kSynthFile);
  const fs::path csv_path = resolve(paths.metrics, kRecoverCsv);
  const fs::path sim_path = dir_ / kSimilarityCsv;
  const fs::path probe_path = dir_ / kProbeCsv;
  const std::string fp =
      fingerprint("recover", config_subset(cfg_, {"dataset.", "recover.", "metrics."}, {"recover.workers"}),
                  {{"train", d.train_sha256}, {"teacher", teacher_hash}});
  if (can_skip("recover", fp,
               {{"synth", out}, {"recover_csv", csv_path}, {"similarity_csv", sim_path}, {"probe_csv", probe_path}})) {
    spdlog::info("{}: recover up to date", opts_.run_id);
    return {"recover", true, 0.0};
  }
  return run_stage("recover", [&](json& info) {
    const diffnet::Model teacher = diffnet::load_checkpoint(teacher_path.string()).model;
    const recover::RecoverConfig rcfg = effective_recover(cfg_, opts_.deterministic);
    const dataio::ClassIndex idx = dataio::build_class_index(d.train);
    const recover::SyntheticSet init = recover::init_full_image(d.train, idx, rcfg.ipc, cfg_.seed);
    metrics::SimilarityTrace trace(teacher, cfg_.seed, init.num_classes, init.height, init.width,
                                   cfg_.metrics.probe_crops, rcfg.crops);
    const auto t0 = std::chrono::steady_clock::now();
    recover::RecoverResult r = recover::run_recover(
        init, teacher, rcfg, [&](int cls, int step, std::span<const diffnet::Tensor> images) {
          trace.record(cls, step, images);
        });
    info["recover_ms"] = elapsed_ms(t0);
    recover::save_synth(out.string(), r.set);
    write_text(csv_path, recover::metric_csv(opts_.run_id, r.rows));
    const auto points = trace.points();
    write_text(sim_path, metrics::similarity_csv(opts_.run_id, points));
    write_text(probe_path, metrics::probe_csv(opts_.run_id, points));
    for (const auto& [name, path] :
         {std::pair<const char*, fs::path>{"synth", out}, {"recover_csv", csv_path}, {"similarity_csv", sim_path},
          {"probe_csv", probe_path}}) {
      manifest_.set_artifact(name, path);
    }
    json shards = json::array();
    int early = 0;
    for (const recover::ShardReport& s : r.shards) {
      early += s.early_stopped ? 1 : 0;
      shards.push_back({{"class", s.cls},
                        {"stop_step", s.stop_step},
                        {"early_stopped", s.early_stopped},
                        {"explore_steps", s.explore_steps},
                        {"exploit_steps", s.exploit_steps},
                        {"insertions", s.counters.insertions},
                        {"threshold_evictions", s.counters.threshold_evictions},
                        {"capacity_evictions", s.counters.capacity_evictions}});
    }
    info["teacher_sha256"] = teacher_hash;
    info["workers"] = rcfg.workers;
    info["stop_step"] = r.stop_step;
    info["early_stopped_classes"] = early;
    info["shards"] = shards;
    const auto cosine = trace.global_cosine();
    info["final_global_cosine"] = cosine.empty() ? json(nullptr) : optional_json(cosine.back().second);
    const auto ce = trace.global_probe_ce();
    info["final_probe_ce"] = ce.empty() ? json(nullptr) : json(ce.back().second);
    return fp;
  });
}

StageOutcome Run::eval(const StagePaths& paths) {
  const Data& d = data();
  const fs::path teacher_path = input(paths.teacher, "teacher", kTeacherFile);
  const fs::path synth_path = input(paths.synth, "synthetic set", kSynthFile);
  const std::string teacher_hash = manifest_.verify_input("teacher", teacher_path);
  const std::string synth_hash = manifest_.verify_input("synth", synth_path);
  const fs::path out = resolve(paths.out, kStudentFile);
  const fs::path csv_path = resolve(paths.metrics, kEvalCsv);
  const std::string fp = fingerprint("eval", config_subset(cfg_, {"dataset.", "eval."}),
                                     {{"test", d.test_sha256}, {"teacher", teacher_hash}, {"synth", synth_hash}});
  if (can_skip("eval", fp, {{"student", out}, {"eval_csv", csv_path}})) {
    spdlog::info("{}: eval up to date", opts_.run_id);
    return {"eval", true, 0.0};
  }
  return run_stage("eval", [&](json& info) {
    const diffnet::Model teacher = diffnet::load_checkpoint(teacher_path.string()).model;
    const recover::SyntheticSet set = recover::load_synth(synth_path.string());
    evaluate::StudentConfig scfg = cfg_.eval;
    scfg.seed = cfg_.seed;
    const evaluate::StudentResult r = evaluate::train_student(set, teacher, d.test, scfg);
    diffnet::save_checkpoint(out.string(), scfg.ema_rate > 0.0 ? r.ema : r.student, r.top1);
    write_text(csv_path, evaluate::eval_csv(opts_.run_id, r.rows));
    manifest_.set_artifact("student", out);
    manifest_.set_artifact("eval_csv", csv_path);
    info["top1"] = r.top1;
    info["raw_top1"] = r.raw_top1;
    info["ema_top1"] = r.ema_top1;
    info["teacher_sha256"] = teacher_hash;
    info["synth_sha256"] = synth_hash;
    return fp;
  });
}

metrics::SimilarityReport Run::metrics(const StagePaths& paths) {
  const fs::path teacher_path = input(paths.teacher, "teacher", kTeacherFile);
  const fs::path synth_path = input(paths.synth, "synthetic set", kSynthFile);
  const std::string teacher_hash = manifest_.verify_input("teacher", teacher_path);
  const std::string synth_hash = manifest_.verify_input("synth", synth_path);
  const fs::path out = resolve(paths.out, kFinalSimilarityCsv);
  metrics::SimilarityReport report;
  run_stage("metrics", [&](json& info) {
    const diffnet::Model teacher = diffnet::load_checkpoint(teacher_path.string()).model;
    const recover::SyntheticSet set = recover::load_synth(synth_path.string());
    report = metrics::feature_similarity(teacher, set, static_cast<int>(set.step));
    std::vector<metrics::TracePoint> points;
    for (const metrics::ClassSimilarity& c : report.classes) points.push_back({report.step, c.cls, c.mean_cosine, 0.0});
    write_text(out, metrics::similarity_csv(opts_.run_id, points));
    manifest_.set_artifact("similarity_final", out);
    info["global_cosine"] = optional_json(report.global_mean);
    return fingerprint("metrics", json::object(), {{"teacher", teacher_hash}, {"synth", synth_hash}});
  });
  return report;
}

std::vector<StageOutcome> Run::pipeline() {
  std::vector<StageOutcome> out;
  out.push_back(squeeze());
  out.push_back(recover());
  out.push_back(eval());
  return out;
}

std::vector<std::string> ablation_axes() { return {"variant", "k_fraction", "epsilon", "schedule"}; }

std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "variant") return {"e2d", "random", "exploit-only", "alternating", "gradcam"};
  if (axis == "k_fraction") return {"0.4", "0.6", "0.7", "0.8"};
  if (axis == "epsilon") return {"0", "0.25", "0.5", "1"};
  if (axis == "schedule") return {"ssrs", "cosine"};
  fail(ErrorKind::Config, fmt::format("unknown ablation axis '{}' (expected one of: {})", axis,
                                      fmt::join(ablation_axes(), ", ")));
}

RunConfig apply_axis(const RunConfig& cfg, const std::string& axis, const std::string& value) {
  RunConfig out = cfg;
  if (axis == "variant") {
    set_key(out, "recover.variant", value);
  } else if (axis == "k_fraction") {
    RunConfig probe = cfg;
    set_key(probe, "recover.epsilon", value);  // reuses the number parser
    const double f = probe.recover.epsilon;
    require(f > 0.0 && f < 1.0, ErrorKind::Config, "k_fraction must lie in (0, 1), got " + value);
    out.recover.explore_iterations =
        std::clamp(static_cast<int>(std::lround(f * out.recover.iterations)), 1, out.recover.iterations - 1);
  } else if (axis == "epsilon") {
    set_key(out, "recover.epsilon", value);
  } else if (axis == "schedule") {
    set_key(out, "eval.schedule", value);
  } else {
    default_axis_values(axis);
  }
  validate(out);
  return out;
}

std::vector<AblationRow> ablate(const RunConfig& cfg, const RunOptions& opts, const std::string& axis,
                                std::vector<std::string> values) {
  const std::vector<std::string> defaults = default_axis_values(axis);
  if (values.empty()) values = defaults;
  Run base(cfg, opts);
  base.squeeze();
  const fs::path teacher = base.dir() / kTeacherFile;
  base.manifest().verify_input("teacher", teacher);
  const bool shared_synth = axis == "schedule";
  if (shared_synth) base.recover();
  const fs::path synth = base.dir() / kSynthFile;

  std::vector<AblationRow> rows;
  for (const std::string& value : values) {
    AblationRow row;
    row.run_id = opts.run_id + "-" + axis + "-" + value;
    row.axis = axis;
    row.value = value;
    try {
      RunOptions sub_opts = opts;
      sub_opts.run_id = row.run_id;
      Run sub(apply_axis(cfg, axis, value), sub_opts);
      StagePaths paths;
      paths.teacher = teacher.string();
      if (shared_synth) {
        paths.synth = synth.string();
      } else {
        sub.recover(paths);
      }
      sub.eval(paths);
      const json* rec = (shared_synth ? base : sub).manifest().find_stage("recover");
      const json* ev = sub.manifest().find_stage("eval");
      row.top1 = ev->value("top1", 0.0);
      row.stop_step = rec->value("stop_step", 0);
      row.recover_wall_ms = rec->value("recover_ms", rec->value("wall_ms", 0.0));
      if (rec->contains("final_global_cosine") && (*rec)["final_global_cosine"].is_number()) {
        row.final_global_cosine = (*rec)["final_global_cosine"].get<double>();
      }
    } catch (const Error& e) {
      row.status = "failed";
      row.error = e.what();
      spdlog::error("{}: {}", row.run_id, e.what());
    }
    rows.push_back(std::move(row));
  }
  write_text(base.dir() / fmt::format("ablate_{}.csv", axis), ablation_csv(rows));
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "run_id,axis,value,top1,stop_step,recover_wall_ms,final_global_cosine,status,error\n";
  for (const AblationRow& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", csv::field(r.run_id), r.axis, csv::field(r.value),
                       csv::number(r.top1), r.stop_step ? std::to_string(*r.stop_step) : std::string(),
                       csv::number(r.recover_wall_ms), csv::number(r.final_global_cosine), r.status,
                       csv::field(r.error));
  }
  return out;
}

} // namespace e2d::pipeline

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

#include "pipeline/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "common/error.hpp"

namespace e2d::pipeline {

namespace {

struct KeyDef {
  std::string section;  // empty for top-level keys
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string dotted() const { return section.empty() ? name : section + "." + name; }
};

[[noreturn]] void bad_value(const std::string& key, const std::string& what, const std::string& text) {
  fail(ErrorKind::Config, key + ": expected " + what + ", got '" + text + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  T v{};
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || end != t.data() + t.size()) {
    bad_value(key, std::is_integral_v<T> ? "an integer" : "a number", text);
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  bad_value(key, "true or false", text);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    return fmt::format("{}", fmt::join(v, ", "));
  } else if constexpr (std::is_same_v<T, std::vector<float>>) {
    return fmt::format("{}", fmt::join(v, ", "));
  } else {
    return fmt::format("{}", v);
  }
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, bool>) {
    return parse_bool(key, text);
  } else if constexpr (std::is_same_v<T, std::string>) {
    return trim(text);
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    return split_list(text);
  } else if constexpr (std::is_same_v<T, std::vector<float>>) {
    std::vector<float> out;
    for (const std::string& item : split_list(text)) out.push_back(parse_number<float>(key, item));
    if (out.empty()) bad_value(key, "a comma-separated list of numbers", text);
    return out;
  } else {
    return parse_number<T>(key, text);
  }
}

template <typename T, typename Ref>
KeyDef field(const char* section, const char* name, Ref ref) {
  const std::string dotted = std::string(section).empty() ? name : std::string(section) + "." + name;
  return {section, name, [ref](const RunConfig& c) { return format_value<T>(ref(const_cast<RunConfig&>(c))); },
          [ref, dotted](RunConfig& c, const std::string& v) { ref(c) = parse_value<T>(dotted, v); }};
}

template <typename Get, typename Set>
KeyDef enum_field(const char* section, const char* name, Get get, Set set) {
  const std::string dotted = std::string(section) + "." + name;
  return {section, name, get, [set, dotted](RunConfig& c, const std::string& v) {
            try {
              set(c, trim(v));
            } catch (const Error& e) {
              fail(ErrorKind::Config, dotted + ": " + e.what());
            }
          }};
}

// clang-format off
const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
    field<std::uint64_t>("", "seed", [](RunConfig& c) -> auto& { return c.seed; }),

    field<std::string>("dataset", "format", [](RunConfig& c) -> auto& { return c.dataset.format; }),
    field<std::string>("dataset", "train_images", [](RunConfig& c) -> auto& { return c.dataset.train_images; }),
    field<std::string>("dataset", "train_labels", [](RunConfig& c) -> auto& { return c.dataset.train_labels; }),
    field<std::string>("dataset", "test_images", [](RunConfig& c) -> auto& { return c.dataset.test_images; }),
    field<std::string>("dataset", "test_labels", [](RunConfig& c) -> auto& { return c.dataset.test_labels; }),
    field<std::vector<std::string>>("dataset", "train_files", [](RunConfig& c) -> auto& { return c.dataset.train_files; }),
    field<std::vector<std::string>>("dataset", "test_files", [](RunConfig& c) -> auto& { return c.dataset.test_files; }),
    field<int>("dataset", "classes", [](RunConfig& c) -> auto& { return c.dataset.classes; }),
    field<std::vector<float>>("dataset", "mean", [](RunConfig& c) -> auto& { return c.dataset.mean; }),
    field<std::vector<float>>("dataset", "std", [](RunConfig& c) -> auto& { return c.dataset.std; }),

    field<int>("teacher", "width", [](RunConfig& c) -> auto& { return c.teacher.width; }),
    field<int>("teacher", "depth", [](RunConfig& c) -> auto& { return c.teacher.depth; }),
    field<int>("teacher", "epochs", [](RunConfig& c) -> auto& { return c.teacher.epochs; }),
    field<int>("teacher", "batch_size", [](RunConfig& c) -> auto& { return c.teacher.batch_size; }),
    field<double>("teacher", "lr", [](RunConfig& c) -> auto& { return c.teacher.lr; }),
    field<double>("teacher", "weight_decay", [](RunConfig& c) -> auto& { return c.teacher.weight_decay; }),
    field<bool>("teacher", "augment", [](RunConfig& c) -> auto& { return c.teacher.augment; }),
    field<int>("teacher", "crop_padding", [](RunConfig& c) -> auto& { return c.teacher.crop_padding; }),

    field<int>("recover", "ipc", [](RunConfig& c) -> auto& { return c.recover.ipc; }),
    field<int>("recover", "iterations", [](RunConfig& c) -> auto& { return c.recover.iterations; }),
    field<int>("recover", "explore_iterations", [](RunConfig& c) -> auto& { return c.recover.explore_iterations; }),
    field<double>("recover", "epsilon", [](RunConfig& c) -> auto& { return c.recover.epsilon; }),
    field<double>("recover", "alpha_bn", [](RunConfig& c) -> auto& { return c.recover.alpha_bn; }),
    field<double>("recover", "lr", [](RunConfig& c) -> auto& { return c.recover.lr; }),
    field<double>("recover", "beta1", [](RunConfig& c) -> auto& { return c.recover.beta1; }),
    field<double>("recover", "beta2", [](RunConfig& c) -> auto& { return c.recover.beta2; }),
    field<double>("recover", "weight_decay", [](RunConfig& c) -> auto& { return c.recover.weight_decay; }),
    field<int>("recover", "batch_size", [](RunConfig& c) -> auto& { return c.recover.batch_size; }),
    field<double>("recover", "scale_min", [](RunConfig& c) -> auto& { return c.recover.crops.scale_lo; }),
    field<double>("recover", "scale_max", [](RunConfig& c) -> auto& { return c.recover.crops.scale_hi; }),
    field<double>("recover", "aspect_min", [](RunConfig& c) -> auto& { return c.recover.crops.aspect_lo; }),
    field<double>("recover", "aspect_max", [](RunConfig& c) -> auto& { return c.recover.crops.aspect_hi; }),
    field<int>("recover", "buffer_capacity", [](RunConfig& c) -> auto& { return c.recover.buffer_capacity; }),
    enum_field("recover", "variant",
               [](const RunConfig& c) { return std::string(recover::variant_name(c.recover.variant)); },
               [](RunConfig& c, const std::string& v) { c.recover.variant = recover::parse_variant(v); }),
    field<int>("recover", "alternate_period", [](RunConfig& c) -> auto& { return c.recover.alternate_period; }),
    field<int>("recover", "workers", [](RunConfig& c) -> auto& { return c.recover.workers; }),

    field<int>("eval", "width", [](RunConfig& c) -> auto& { return c.eval.width; }),
    field<int>("eval", "epochs", [](RunConfig& c) -> auto& { return c.eval.epochs; }),
    field<int>("eval", "batch_size", [](RunConfig& c) -> auto& { return c.eval.batch_size; }),
    field<double>("eval", "lr", [](RunConfig& c) -> auto& { return c.eval.lr; }),
    field<double>("eval", "weight_decay", [](RunConfig& c) -> auto& { return c.eval.weight_decay; }),
    enum_field("eval", "loss",
               [](const RunConfig& c) { return std::string(evaluate::soft_loss_name(c.eval.loss)); },
               [](RunConfig& c, const std::string& v) { c.eval.loss = evaluate::parse_soft_loss(v); }),
    field<double>("eval", "ce_weight", [](RunConfig& c) -> auto& { return c.eval.ce_weight; }),
    field<double>("eval", "ema_rate", [](RunConfig& c) -> auto& { return c.eval.ema_rate; }),
    field<double>("eval", "scale_min", [](RunConfig& c) -> auto& { return c.eval.crops.scale_lo; }),
    field<double>("eval", "scale_max", [](RunConfig& c) -> auto& { return c.eval.crops.scale_hi; }),
    field<double>("eval", "aspect_min", [](RunConfig& c) -> auto& { return c.eval.crops.aspect_lo; }),
    field<double>("eval", "aspect_max", [](RunConfig& c) -> auto& { return c.eval.crops.aspect_hi; }),
    field<double>("eval", "flip_prob", [](RunConfig& c) -> auto& { return c.eval.flip_prob; }),
    field<double>("eval", "cutmix_alpha", [](RunConfig& c) -> auto& { return c.eval.cutmix_alpha; }),
    field<double>("eval", "cutmix_prob", [](RunConfig& c) -> auto& { return c.eval.cutmix_prob; }),
    enum_field("eval", "schedule",
               [](const RunConfig& c) { return std::string(evaluate::schedule_name(c.eval.schedule)); },
               [](RunConfig& c, const std::string& v) { c.eval.schedule = evaluate::parse_schedule(v); }),
    field<double>("eval", "zeta", [](RunConfig& c) -> auto& { return c.eval.zeta; }),
    field<int>("eval", "test_every", [](RunConfig& c) -> auto& { return c.eval.test_every; }),

    field<int>("metrics", "stride", [](RunConfig& c) -> auto& { return c.metrics.stride; }),
    field<int>("metrics", "probe_crops", [](RunConfig& c) -> auto& { return c.metrics.probe_crops; }),
  };
  return table;
}
// clang-format on

const KeyDef& find_key(const std::string& key) {
  for (const KeyDef& k : key_table()) {
    if (k.dotted() == key) return k;
  }
  fail(ErrorKind::Config, "unknown key '" + key + "'");
}

const std::set<std::string> kSections = {"dataset", "teacher", "recover", "eval", "metrics"};

} // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const KeyDef& k : key_table()) out.push_back(k.dotted());
  return out;
}

std::string get_key(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) { find_key(key).set(cfg, value); }

RunConfig parse_config(const std::string& text, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorKind::Config, fmt::format("{}:{}: {}", source, e.line(), e.message()));
  }
  RunConfig cfg;
  try {
    for (const auto& [name, node] : tree) {
      if (node.empty()) {
        set_key(cfg, name, node.data());
        continue;
      }
      if (!kSections.count(name)) fail(ErrorKind::Config, "unknown section [" + name + "]");
      for (const auto& [key, leaf] : node) set_key(cfg, name + "." + key, leaf.data());
    }
    validate(cfg);
  } catch (const Error& e) {
    fail(ErrorKind::Config, source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Config, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config(ss.str(), path);
  cfg.base_dir = std::filesystem::absolute(std::filesystem::path(path)).parent_path().string();
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section = "\x01";
  for (const KeyDef& k : key_table()) {
    if (k.section != section) {
      section = k.section;
      if (!section.empty()) out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

void validate(const RunConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
  check(d.format == "idx" || d.format == "cifar", "dataset.format: expected idx or cifar, got '" + d.format + "'");
  check(d.classes >= 1, "dataset.classes must be >= 1");
  check(!d.mean.empty() && d.mean.size() == d.std.size(), "dataset.mean and dataset.std need one value per channel");
  for (float s : d.std) check(s > 0.0f, "dataset.std values must be positive");
  check(cfg.teacher.width >= 1 && cfg.teacher.depth >= 1 && cfg.teacher.epochs >= 0 && cfg.teacher.batch_size >= 1 &&
            cfg.teacher.lr > 0.0 && cfg.teacher.weight_decay >= 0.0 && cfg.teacher.crop_padding >= 0,
        "teacher: width, depth and batch_size must be >= 1, epochs and crop_padding >= 0, lr > 0");
  recover::RecoverConfig r = cfg.recover;
  if (r.workers == 0) r.workers = 1;  // 0 selects the core count at run time
  recover::validate(r);
  evaluate::validate(cfg.eval);
  const long images = static_cast<long>(d.classes) * cfg.recover.ipc;
  const long iterations = (images + cfg.eval.batch_size - 1) / cfg.eval.batch_size * cfg.eval.epochs;
  check(cfg.eval.schedule != evaluate::Schedule::Ssrs || iterations == 0 || iterations >= 6,
        fmt::format("eval.schedule = ssrs needs at least 6 student iterations; eval.epochs = {} and eval.batch_size "
                    "= {} give {} for {} images",
                    cfg.eval.epochs, cfg.eval.batch_size, iterations, images));
  check(cfg.metrics.stride >= 0, "metrics.stride must be >= 0");
  check(cfg.metrics.probe_crops >= 0, "metrics.probe_crops must be >= 0");
}

nlohmann::json config_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const KeyDef& k : key_table()) j[k.dotted()] = k.get(cfg);
  return j;
}

int effective_stride(const RunConfig& cfg) {
  if (cfg.metrics.stride > 0) return cfg.metrics.stride;
  return std::max(1, cfg.recover.iterations / 20);
}

recover::RecoverConfig effective_recover(const RunConfig& cfg, bool deterministic) {
  recover::RecoverConfig r = cfg.recover;
  r.seed = cfg.seed;
  r.snapshot_stride = effective_stride(cfg);
  if (deterministic) {
    r.workers = 1;
  } else if (r.workers == 0) {
    r.workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  }
  return r;
}

} // namespace e2d::pipeline

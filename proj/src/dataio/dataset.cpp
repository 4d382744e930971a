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

#include "dataio/dataset.hpp"

#include <algorithm>
#include <numeric>

#include <spdlog/spdlog.h>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace e2d::dataio {

using diffnet::Tensor;

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

int infer_classes(const std::vector<int>& labels) {
  int top = -1;
  for (int y : labels) top = std::max(top, y);
  return top + 1;
}

void put_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

} // namespace

void validate(const RawDataset& ds) {
  require(ds.count() > 0, ErrorKind::Format, "empty dataset");
  require(ds.pixels.size() == ds.count() * ds.image_bytes(), ErrorKind::Format,
          "pixel count does not match label count");
  require(ds.num_classes > 0, ErrorKind::Format, "dataset has no classes");
  std::vector<int> per_class(static_cast<std::size_t>(ds.num_classes), 0);
  for (int y : ds.labels) {
    require(y >= 0 && y < ds.num_classes, ErrorKind::Format,
            "label " + std::to_string(y) + " out of range for " + std::to_string(ds.num_classes) + " classes");
    ++per_class[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    require(per_class[c] > 0, ErrorKind::Format, "class " + std::to_string(c) + " has no images");
  }
}

RawDataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                     const std::string& source) {
  ByteReader ri(images, source + " images");
  const std::uint32_t im_magic = ri.u32_be();
  require(im_magic == kIdxImageMagic, ErrorKind::Format, source + ": bad IDX image magic");
  const std::uint32_t n = ri.u32_be();
  const std::uint32_t rows = ri.u32_be();
  const std::uint32_t cols = ri.u32_be();

  ByteReader rl(labels, source + " labels");
  const std::uint32_t lb_magic = rl.u32_be();
  require(lb_magic == kIdxLabelMagic, ErrorKind::Format, source + ": bad IDX label magic");
  const std::uint32_t nl = rl.u32_be();
  require(n == nl, ErrorKind::Format,
          source + ": image count " + std::to_string(n) + " does not match label count " + std::to_string(nl));
  require(rows > 0 && cols > 0 && rows < 4096 && cols < 4096, ErrorKind::Format, source + ": bad IDX dimensions");

  RawDataset ds;
  ds.channels = 1;
  ds.height = static_cast<int>(rows);
  ds.width = static_cast<int>(cols);
  auto px = ri.take(static_cast<std::size_t>(n) * rows * cols);
  ds.pixels.assign(px.begin(), px.end());
  require(ri.done(), ErrorKind::Format, source + ": trailing bytes after IDX images");
  auto lb = rl.take(n);
  ds.labels.assign(lb.begin(), lb.end());
  require(rl.done(), ErrorKind::Format, source + ": trailing bytes after IDX labels");
  ds.num_classes = infer_classes(ds.labels);
  ds.norm = {{0.0f}, {1.0f}};
  validate(ds);
  return ds;
}

RawDataset parse_idx_files(const std::string& image_file, const std::string& label_file) {
  return parse_idx(read_file(image_file), read_file(label_file), image_file);
}

RawDataset parse_cifar_bin(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    fail(ErrorKind::Format, source + ": truncated record at byte offset " + std::to_string(whole) +
                                " (length " + std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  RawDataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  ds.labels.reserve(n);
  ds.pixels.reserve(n * 3072);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    ds.labels.push_back(rec[0]);
    ds.pixels.insert(ds.pixels.end(), rec + 1, rec + kCifarRecordBytes);
  }
  ds.num_classes = infer_classes(ds.labels);
  ds.norm = {{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}};
  validate(ds);
  return ds;
}

RawDataset parse_cifar_files(const std::vector<std::string>& files) {
  require(!files.empty(), ErrorKind::InvalidArgument, "no CIFAR batch files given");
  std::vector<std::uint8_t> all;
  for (const std::string& f : files) {
    const auto bytes = read_file(f);
    require(bytes.size() % kCifarRecordBytes == 0, ErrorKind::Format,
            f + ": truncated record at byte offset " +
                std::to_string(bytes.size() / kCifarRecordBytes * kCifarRecordBytes));
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_cifar_bin(all, files.front());
}

std::vector<std::uint8_t> serialize_idx_images(const RawDataset& ds) {
  require(ds.channels == 1, ErrorKind::InvalidArgument, "IDX images are single-channel");
  std::vector<std::uint8_t> out;
  put_be(out, kIdxImageMagic);
  put_be(out, static_cast<std::uint32_t>(ds.count()));
  put_be(out, static_cast<std::uint32_t>(ds.height));
  put_be(out, static_cast<std::uint32_t>(ds.width));
  out.insert(out.end(), ds.pixels.begin(), ds.pixels.end());
  return out;
}

std::vector<std::uint8_t> serialize_idx_labels(const RawDataset& ds) {
  std::vector<std::uint8_t> out;
  put_be(out, kIdxLabelMagic);
  put_be(out, static_cast<std::uint32_t>(ds.count()));
  for (int y : ds.labels) out.push_back(static_cast<std::uint8_t>(y));
  return out;
}

std::vector<std::uint8_t> serialize_cifar_bin(const RawDataset& ds) {
  require(ds.channels == 3 && ds.height == 32 && ds.width == 32, ErrorKind::InvalidArgument,
          "CIFAR records are 3x32x32");
  std::vector<std::uint8_t> out;
  out.reserve(ds.count() * kCifarRecordBytes);
  for (std::size_t i = 0; i < ds.count(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

ClassIndex build_class_index(const RawDataset& ds) {
  ClassIndex idx;
  idx.members.resize(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.count(); ++i) {
    idx.members[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));
  }
  return idx;
}

std::vector<int> sample_init_images(const RawDataset& /*ds*/, const ClassIndex& idx, int c, int ipc, Rng& rng) {
  require(c >= 0 && static_cast<std::size_t>(c) < idx.members.size(), ErrorKind::InvalidArgument,
          "class " + std::to_string(c) + " out of range");
  require(ipc >= 1, ErrorKind::InvalidArgument, "ipc must be positive");
  const std::vector<int>& pool = idx.members[static_cast<std::size_t>(c)];
  require(!pool.empty(), ErrorKind::InvalidArgument, "class " + std::to_string(c) + " is empty");
  std::vector<int> out;
  if (static_cast<std::size_t>(ipc) > pool.size()) {
    spdlog::warn("class {} has {} images but ipc is {}; sampling with replacement", c, pool.size(), ipc);
    for (int i = 0; i < ipc; ++i) out.push_back(pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))]);
    return out;
  }
  // Partial Fisher-Yates over a copy.
  std::vector<int> work = pool;
  for (int i = 0; i < ipc; ++i) {
    const int j = uniform_int(rng, i, static_cast<int>(work.size()) - 1);
    std::swap(work[static_cast<std::size_t>(i)], work[static_cast<std::size_t>(j)]);
    out.push_back(work[static_cast<std::size_t>(i)]);
  }
  return out;
}

Tensor normalize(std::span<const std::uint8_t> pixels, int channels, int height, int width,
                 const Normalization& norm) {
  require(norm.mean.size() == static_cast<std::size_t>(channels) && norm.std.size() == norm.mean.size(),
          ErrorKind::InvalidArgument, "normalization has the wrong number of channels");
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t per_image = plane * channels;
  require(per_image > 0 && pixels.size() % per_image == 0, ErrorKind::Shape, "pixel buffer size mismatch");
  const int n = static_cast<int>(pixels.size() / per_image);
  Tensor out({n, channels, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const std::size_t c = (i / plane) % static_cast<std::size_t>(channels);
    out[i] = (static_cast<float>(pixels[i]) / 255.0f - norm.mean[c]) / norm.std[c];
  }
  return out;
}

Tensor normalized_batch(const RawDataset& ds, std::span<const int> ordinals) {
  std::vector<std::uint8_t> buf;
  buf.reserve(ordinals.size() * ds.image_bytes());
  for (int o : ordinals) {
    require(o >= 0 && static_cast<std::size_t>(o) < ds.count(), ErrorKind::InvalidArgument, "ordinal out of range");
    auto img = ds.image(static_cast<std::size_t>(o));
    buf.insert(buf.end(), img.begin(), img.end());
  }
  return normalize(buf, ds.channels, ds.height, ds.width, ds.norm);
}

Tensor denormalize(const Tensor& x, const Normalization& norm) {
  require(x.rank() == 4 && static_cast<std::size_t>(x.dim(1)) == norm.mean.size(), ErrorKind::Shape,
          "denormalize expects (N, C, H, W) matching the normalization");
  Tensor out = x;
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / plane) % norm.mean.size();
    out[i] = x[i] * norm.std[c] + norm.mean[c];
  }
  return out;
}

std::pair<std::vector<float>, std::vector<float>> normalized_bounds(const Normalization& norm) {
  std::vector<float> lo, hi;
  for (std::size_t c = 0; c < norm.mean.size(); ++c) {
    lo.push_back((0.0f - norm.mean[c]) / norm.std[c]);
    hi.push_back((1.0f - norm.mean[c]) / norm.std[c]);
  }
  return {lo, hi};
}

} // namespace e2d::dataio

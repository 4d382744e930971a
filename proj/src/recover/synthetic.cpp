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

#include "recover/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace e2d::recover {

using diffnet::Tensor;

Tensor SyntheticSet::batch() const {
  require(!images.empty(), ErrorKind::InvalidArgument, "synthetic set is empty");
  return diffnet::stack_batch(images);
}

Tensor SyntheticSet::class_batch(int c) const {
  require(c >= 0 && c < num_classes && ipc > 0, ErrorKind::InvalidArgument, "class out of range");
  return diffnet::stack_batch(std::span<const Tensor>(images).subspan(static_cast<std::size_t>(c) * ipc,
                                                                      static_cast<std::size_t>(ipc)));
}

void validate(const SyntheticSet& set) {
  require(set.num_classes >= 0 && set.ipc >= 0, ErrorKind::Format, "negative synthetic set dimensions");
  require(set.images.size() == static_cast<std::size_t>(set.num_classes) * set.ipc, ErrorKind::Format,
          "synthetic image count does not equal L x ipc");
  require(set.provenance.size() == set.images.size(), ErrorKind::Format, "provenance count mismatch");
  require(set.norm.mean.size() == static_cast<std::size_t>(set.channels) && set.norm.std.size() == set.norm.mean.size(),
          ErrorKind::Format, "normalization does not match channel count");
  const std::vector<int> shape = {1, set.channels, set.height, set.width};
  for (const Tensor& t : set.images) {
    require(t.shape() == shape, ErrorKind::Shape, "synthetic image has shape " + t.shape_string());
    require(t.all_finite(), ErrorKind::NonFinite, "synthetic image has non-finite pixels");
  }
}

SyntheticSet init_full_image(const dataio::RawDataset& ds, const dataio::ClassIndex& idx, int ipc,
                             std::uint64_t seed) {
  require(ipc >= 0, ErrorKind::InvalidArgument, "ipc must be non-negative");
  SyntheticSet set;
  set.num_classes = ds.num_classes;
  set.ipc = ipc;
  set.channels = ds.channels;
  set.height = ds.height;
  set.width = ds.width;
  set.norm = ds.norm;
  if (ipc == 0) {
    return set;
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    Rng rng(derive_seed(seed, "init", static_cast<std::uint64_t>(c)));
    for (int o : dataio::sample_init_images(ds, idx, c, ipc, rng)) {
      const int one[] = {o};
      set.images.push_back(dataio::normalized_batch(ds, one));
      set.provenance.push_back(o);
    }
  }
  return set;
}

std::vector<std::uint8_t> serialize_synth(const SyntheticSet& set) {
  validate(set);
  ByteWriter w;
  w.text("E2DS");
  w.u32(kSynthVersion);
  for (int v : {set.num_classes, set.ipc, set.height, set.width, set.channels}) w.u32(static_cast<std::uint32_t>(v));
  w.f32s(set.norm.mean);
  w.f32s(set.norm.std);
  for (const Tensor& t : set.images) w.f32s(t.values());
  for (int o : set.provenance) w.u32(static_cast<std::uint32_t>(o));
  return w.buffer();
}

SyntheticSet deserialize_synth(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  require(r.remaining() >= 4 && r.text(4) == "E2DS", ErrorKind::Format, source + ": bad synthetic-set magic");
  const std::uint32_t version = r.u32();
  require(version == kSynthVersion, ErrorKind::Format, source + ": unsupported synthetic-set version " + std::to_string(version));
  SyntheticSet set;
  const std::uint32_t l = r.u32(), ipc = r.u32(), h = r.u32(), w = r.u32(), c = r.u32();
  require(l < 100000 && ipc < 100000 && h >= 1 && h < 4096 && w >= 1 && w < 4096 && c >= 1 && c <= 4,
          ErrorKind::Format, source + ": implausible synthetic-set header");
  set.num_classes = static_cast<int>(l);
  set.ipc = static_cast<int>(ipc);
  set.height = static_cast<int>(h);
  set.width = static_cast<int>(w);
  set.channels = static_cast<int>(c);
  for (std::uint32_t i = 0; i < c; ++i) set.norm.mean.push_back(r.f32());
  for (std::uint32_t i = 0; i < c; ++i) set.norm.std.push_back(r.f32());
  const std::size_t n = static_cast<std::size_t>(l) * ipc;
  for (std::size_t k = 0; k < n; ++k) {
    Tensor t({1, set.channels, set.height, set.width});
    for (float& v : t.values()) v = r.f32();
    set.images.push_back(std::move(t));
  }
  for (std::size_t k = 0; k < n; ++k) set.provenance.push_back(static_cast<int>(r.u32()));
  require(r.done(), ErrorKind::Format, source + ": trailing bytes after synthetic set");
  validate(set);
  return set;
}

void save_synth(const std::string& path, const SyntheticSet& set) { write_file(path, serialize_synth(set)); }

SyntheticSet load_synth(const std::string& path) { return deserialize_synth(read_file(path), path); }

std::vector<std::uint8_t> to_8bit(const SyntheticSet& set) {
  std::vector<std::uint8_t> out;
  for (const Tensor& t : set.images) {
    const Tensor unit = dataio::denormalize(t, set.norm);
    for (float v : unit.values()) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

} // namespace e2d::recover

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

#include "diffnet/checkpoint.hpp"

#include <map>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace e2d::diffnet {

namespace {

void write_record(ByteWriter& w, const std::string& name, const Tensor& t) {
  require(name.size() <= 0xffff, ErrorKind::InvalidArgument, "record name too long");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.text(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(t.values());
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, std::optional<double> top1) {
  ByteWriter w;
  w.text("E2DC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.layers().size()));

  const InputShape& in = model.input_shape();
  write_record(w, "model.input",
               Tensor({3}, {static_cast<float>(in.channels), static_cast<float>(in.height),
                            static_cast<float>(in.width)}));
  std::vector<float> arch;
  for (const LayerSpec& l : model.layers()) {
    arch.insert(arch.end(), {static_cast<float>(l.kind), static_cast<float>(l.in_features),
                             static_cast<float>(l.out_features), static_cast<float>(l.kernel),
                             static_cast<float>(l.stride), static_cast<float>(l.padding)});
  }
  write_record(w, "model.layers", Tensor({static_cast<int>(model.layers().size()), 6}, arch));

  for (const Parameter& p : model.parameters()) write_record(w, p.name, p.value);

  std::size_t bn = 0;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    if (model.layers()[i].kind != LayerKind::BatchNorm) continue;
    const std::string prefix = "layer" + std::to_string(i);
    write_record(w, prefix + ".running_mean", model.bn_stats().mean[bn]);
    write_record(w, prefix + ".running_var", model.bn_stats().var[bn]);
    ++bn;
  }
  if (top1) write_record(w, "meta.top1", Tensor::scalar(static_cast<float>(*top1)));
  return w.buffer();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  require(r.remaining() >= 4 && r.text(4) == "E2DC", ErrorKind::Format, source + ": bad checkpoint magic");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorKind::Format,
          source + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t layer_count = r.u32();

  std::map<std::string, Tensor> records;
  while (!r.done()) {
    const std::uint16_t len = r.u16();
    std::string name = r.text(len);
    const int rank = r.u8();
    require(rank >= 1 && rank <= 4, ErrorKind::Format, source + ": record " + name + " has bad rank");
    std::vector<int> dims;
    for (int i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32();
      require(d >= 1 && d < (1u << 28), ErrorKind::Format, source + ": record " + name + " has bad dims");
      dims.push_back(static_cast<int>(d));
    }
    std::vector<float> values(element_count(dims));
    for (float& v : values) v = r.f32();
    require(records.count(name) == 0, ErrorKind::Format, source + ": duplicate record " + name);
    records.emplace(name, Tensor(std::move(dims), std::move(values)));
  }

  auto take = [&](const std::string& name) -> Tensor& {
    auto it = records.find(name);
    require(it != records.end(), ErrorKind::Format, source + ": missing record " + name);
    return it->second;
  };

  const Tensor& in = take("model.input");
  require(in.size() == 3, ErrorKind::Format, source + ": bad model.input record");
  InputShape input{static_cast<int>(in[0]), static_cast<int>(in[1]), static_cast<int>(in[2])};
  const Tensor& arch = take("model.layers");
  require(arch.rank() == 2 && arch.dim(1) == 6 && static_cast<std::uint32_t>(arch.dim(0)) == layer_count,
          ErrorKind::Format, source + ": layer table does not match header layer count");
  std::vector<LayerSpec> layers;
  for (int i = 0; i < arch.dim(0); ++i) {
    const float* row = arch.data() + static_cast<std::size_t>(i) * 6;
    const int kind = static_cast<int>(row[0]);
    require(kind >= 0 && kind <= static_cast<int>(LayerKind::Linear), ErrorKind::Format,
            source + ": unknown layer kind");
    layers.push_back({static_cast<LayerKind>(kind), static_cast<int>(row[1]), static_cast<int>(row[2]),
                      static_cast<int>(row[3]), static_cast<int>(row[4]), static_cast<int>(row[5])});
  }

  Checkpoint ck{Model::from_layers(input, std::move(layers)), std::nullopt};
  std::size_t consumed = 2;
  for (Parameter& p : ck.model.parameters()) {
    const Tensor& t = take(p.name);
    require(t.same_shape(p.value), ErrorKind::Format,
            source + ": record " + p.name + " has shape " + t.shape_string() + ", expected " +
                p.value.shape_string());
    p.value = t;
    ++consumed;
  }
  std::size_t bn = 0;
  for (std::size_t i = 0; i < ck.model.layers().size(); ++i) {
    if (ck.model.layers()[i].kind != LayerKind::BatchNorm) continue;
    const std::string prefix = "layer" + std::to_string(i);
    Tensor& mean = ck.model.bn_stats().mean[bn];
    Tensor& var = ck.model.bn_stats().var[bn];
    const Tensor& rm = take(prefix + ".running_mean");
    const Tensor& rv = take(prefix + ".running_var");
    require(rm.same_shape(mean) && rv.same_shape(var), ErrorKind::Format,
            source + ": BN statistics for " + prefix + " have the wrong shape");
    for (float v : rv.values()) {
      require(v > 0.0f, ErrorKind::Format, source + ": non-positive running variance in " + prefix);
    }
    mean = rm;
    var = rv;
    consumed += 2;
    ++bn;
  }
  if (auto it = records.find("meta.top1"); it != records.end()) {
    ck.top1 = it->second[0];
    ++consumed;
  }
  require(consumed == records.size(), ErrorKind::Format, source + ": unexpected extra records");
  require(ck.model.parameters_finite(), ErrorKind::NonFinite, source + ": non-finite parameters");
  return ck;
}

void save_checkpoint(const std::string& path, const Model& model, std::optional<double> top1) {
  write_file(path, serialize_checkpoint(model, top1));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path), path); }

} // namespace e2d::diffnet

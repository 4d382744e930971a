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

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "common/error.hpp"

namespace e2d {

/// Little-endian writer into an in-memory byte buffer.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little/big-endian reader; truncation raises ErrorKind::Format
/// with the failing byte offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string source)
      : data_(data), source_(std::move(source)) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

  std::span<const std::uint8_t> take(std::size_t n) {
    if (remaining() < n) {
      fail(ErrorKind::Format, source_ + ": truncated at byte offset " + std::to_string(pos_) +
                                  " (needed " + std::to_string(n) + " bytes, " +
                                  std::to_string(remaining()) + " left)");
    }
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint32_t u32_be() {
    auto s = take(4);
    return (std::uint32_t{s[0]} << 24) | (std::uint32_t{s[1]} << 16) | (std::uint32_t{s[2]} << 8) | s[3];
  }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(le(4))); }
  std::string text(std::size_t n) {
    auto s = take(n);
    return std::string(reinterpret_cast<const char*>(s.data()), s.size());
  }
  const std::string& source() const noexcept { return source_; }

 private:
  std::uint64_t le(std::size_t n) {
    auto s = take(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t{s[i]} << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

/// Whole-file read. Files ending in ".gz" are inflated transparently.
std::vector<std::uint8_t> read_file(const std::string& path);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

} // namespace e2d

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

#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

namespace e2d::csv {

/// Shortest decimal that parses back to the same double; empty for null.
inline std::string number(std::optional<double> v) { return v ? fmt::format("{}", *v) : std::string(); }

/// Quotes a field when it contains a separator, quote or newline.
inline std::string field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Splits simple CSV text into rows of fields (quoted fields supported).
std::vector<std::vector<std::string>> parse(const std::string& text);

} // namespace e2d::csv

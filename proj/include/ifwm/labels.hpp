// Copyright 2026 The IFWM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ifwm/error.hpp"

namespace ifwm {

/// Pixels carrying this value are skipped by the loss and by the metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Integer class raster of shape (n, h, w).
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_,
           std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), values(n_ * h_ * w_, fill) {}

  std::size_t size() const { return values.size(); }
  std::uint8_t at(std::size_t b, std::size_t y, std::size_t x) const {
    return values[(b * h + y) * w + x];
  }
  std::uint8_t& at(std::size_t b, std::size_t y, std::size_t x) {
    return values[(b * h + y) * w + x];
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace ifwm

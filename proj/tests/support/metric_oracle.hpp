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
#include <random>
#include <vector>

#include "ifwm/labels.hpp"

namespace ifwm::testing {

// Scores computed straight from pixel pairs, without a confusion matrix.
struct OracleScores {
  std::vector<std::uint64_t> counts;  // row-major truth x pred
  std::vector<double> precision, recall, f1, iou;
  double mf1 = 0.0, miou = 0.0, pa = 0.0;
};

inline OracleScores oracle_scores(const LabelMap& truth, const LabelMap& pred,
                                  std::size_t classes) {
  OracleScores o;
  o.counts.assign(classes * classes, 0);
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (truth.values[i] == kIgnoreLabel) continue;
    ++o.counts[truth.values[i] * classes + pred.values[i]];
  }
  std::uint64_t correct = 0, seen = 0;
  std::size_t scored = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.values.size(); ++i) {
      const auto t = truth.values[i], p = pred.values[i];
      if (t == kIgnoreLabel) continue;
      if (t == c && p == c) ++tp;
      if (t != c && p == c) ++fp;
      if (t == c && p != c) ++fn;
    }
    const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    o.precision.push_back(p);
    o.recall.push_back(r);
    o.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    o.iou.push_back(tp + fp + fn ? double(tp) / double(tp + fp + fn) : 0.0);
    if (tp + fp + fn) {
      o.mf1 += o.f1.back();
      o.miou += o.iou.back();
      ++scored;
    }
  }
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (truth.values[i] == kIgnoreLabel) continue;
    ++seen;
    if (truth.values[i] == pred.values[i]) ++correct;
  }
  if (scored) {
    o.mf1 /= double(scored);
    o.miou /= double(scored);
  }
  o.pa = seen ? double(correct) / double(seen) : 0.0;
  return o;
}

inline LabelMap random_labels(std::size_t h, std::size_t w, std::size_t classes,
                              std::mt19937_64& rng) {
  LabelMap m(1, h, w);
  std::uniform_int_distribution<int> d(0, static_cast<int>(classes) - 1);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(d(rng));
  return m;
}

}  // namespace ifwm::testing

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
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "ifwm/error.hpp"
#include "ifwm/labels.hpp"

namespace ifwm {

/// counts[i][j] = number of pixels of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0)
      : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * classes_ + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Adds one pixel per non-ignored position. Throws DataError naming the
  /// first label outside [0, classes).
  void accumulate(const LabelMap& truth, const LabelMap& pred) {
    if (truth.n != pred.n || truth.h != pred.h || truth.w != pred.w) {
      throw GeometryError("accumulate: truth and prediction rasters differ in shape");
    }
    for (std::size_t i = 0; i < truth.values.size(); ++i) {
      const std::uint8_t t = truth.values[i];
      const std::uint8_t p = pred.values[i];
      if (t == kIgnoreLabel) continue;
      if (t >= classes_) {
        throw DataError("accumulate: truth label " + std::to_string(t) +
                        " outside [0," + std::to_string(classes_) + ")");
      }
      if (p >= classes_) {
        throw DataError("accumulate: predicted label " + std::to_string(p) +
                        " outside [0," + std::to_string(classes_) + ")");
      }
      ++counts_[t * classes_ + p];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) {
      throw ContractError("merge: class counts differ");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  /// Direct construction from a row-major count table (tests, tooling).
  static ConfusionMatrix from_counts(std::size_t classes,
                                     std::vector<std::uint64_t> counts) {
    if (counts.size() != classes * classes) {
      throw ContractError("from_counts: expected " + std::to_string(classes * classes) +
                          " entries");
    }
    ConfusionMatrix cm(classes);
    cm.counts_ = std::move(counts);
    return cm;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct ClassScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  bool scored = false;  // TP+FP+FN > 0 and not excluded
};

struct Scores {
  std::vector<ClassScore> per_class;
  double mean_f1 = 0.0;
  double mean_iou = 0.0;
  double pixel_accuracy = 0.0;
};

/// Precision = TP/(TP+FP), Recall = TP/(TP+FN), F1 = 2PR/(P+R),
/// IoU = TP/(TP+FP+FN), PA = sum_i P_ii / sum_ij P_ij.
///
/// mF1 and mIoU average over classes with TP+FP+FN > 0 that are not listed
/// in `excluded`. A zero denominator scores 0 for that quantity. PA always
/// counts every class.
inline Scores class_scores(const ConfusionMatrix& cm,
                           const std::vector<std::size_t>& excluded = {}) {
  const std::size_t n = cm.classes();
  Scores s;
  s.per_class.resize(n);
  std::uint64_t diag = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    ClassScore& k = s.per_class[c];
    k.tp = cm.at(c, c);
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      k.fp += cm.at(o, c);
      k.fn += cm.at(c, o);
    }
    const double tp = static_cast<double>(k.tp);
    k.precision = k.tp + k.fp > 0 ? tp / static_cast<double>(k.tp + k.fp) : 0.0;
    k.recall = k.tp + k.fn > 0 ? tp / static_cast<double>(k.tp + k.fn) : 0.0;
    k.f1 = k.precision + k.recall > 0.0
               ? 2.0 * k.precision * k.recall / (k.precision + k.recall)
               : 0.0;
    const std::uint64_t union_ = k.tp + k.fp + k.fn;
    k.iou = union_ > 0 ? tp / static_cast<double>(union_) : 0.0;
    diag += k.tp;
    bool skip = false;
    for (std::size_t e : excluded) skip = skip || e == c;
    k.scored = union_ > 0 && !skip;
    if (k.scored) {
      s.mean_f1 += k.f1;
      s.mean_iou += k.iou;
      ++counted;
    }
  }
  if (counted > 0) {
    s.mean_f1 /= static_cast<double>(counted);
    s.mean_iou /= static_cast<double>(counted);
  }
  const std::uint64_t total = cm.total();
  s.pixel_accuracy = total > 0 ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
  return s;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

/// CSV report: "class,precision,recall,f1,iou", one row per class, then the
/// summary rows "mF1,<v>", "mIoU,<v>", "PA,<v>". For binary tasks
/// (`binary_foreground` set) an extra "IoU,<v>" row reports the foreground
/// class IoU alone.
inline void write_scores_csv(std::ostream& os, const Scores& s,
                             const std::vector<std::string>& class_names = {},
                             int binary_foreground = -1) {
  os << "class,precision,recall,f1,iou\n";
  for (std::size_t c = 0; c < s.per_class.size(); ++c) {
    const auto& k = s.per_class[c];
    os << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ','
       << detail::fmt_double(k.precision) << ',' << detail::fmt_double(k.recall) << ','
       << detail::fmt_double(k.f1) << ',' << detail::fmt_double(k.iou) << '\n';
  }
  os << "mF1," << detail::fmt_double(s.mean_f1) << '\n';
  os << "mIoU," << detail::fmt_double(s.mean_iou) << '\n';
  os << "PA," << detail::fmt_double(s.pixel_accuracy) << '\n';
  if (binary_foreground >= 0 && static_cast<std::size_t>(binary_foreground) < s.per_class.size()) {
    os << "IoU," << detail::fmt_double(s.per_class[binary_foreground].iou) << '\n';
  }
}

}  // namespace ifwm

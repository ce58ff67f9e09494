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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "ifwm/ops.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

/// Builds a scalar loss from `inputs` on the given tape.
template <typename T>
using LossFn = std::function<Tensor<T>(Tape<T>&, std::vector<Tensor<T>>&)>;

struct GradcheckOptions {
  double step = 1e-6;
  // Relative errors are taken against max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  // When nonzero, only this many randomly chosen coordinates are probed
  // (across all inputs).
  std::size_t sample = 0;
  std::uint64_t sample_seed = 0;
  // Optional corruption of one op's backward rule (see Tape).
  std::string fault_op;
  double fault_scale = 1.5;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t probed = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `fn` against central finite
/// differences. Inputs must have requires_grad set.
template <typename T>
GradcheckResult check_gradients(const LossFn<T>& fn,
                                std::vector<Tensor<T>> inputs,
                                const GradcheckOptions& opt = {}) {
  for (auto& t : inputs) t.clear_grad();
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    if (!opt.fault_op.empty()) {
      tape.inject_backward_fault(opt.fault_op, static_cast<T>(opt.fault_scale));
    }
    Tensor<T> loss = fn(tape, inputs);
    tape.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), T(0));
      }
      t.clear_grad();
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
  }
  if (opt.sample != 0 && opt.sample < coords.size()) {
    std::mt19937_64 rng(opt.sample_seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.sample);
  }

  auto eval = [&]() {
    Tape<T> off(false);
    return static_cast<double>(fn(off, inputs).item());
  };

  GradcheckResult result;
  for (auto [i, j] : coords) {
    T& v = inputs[i].mutable_data()[j];
    const T saved = v;
    v = saved + static_cast<T>(opt.step);
    const double up = eval();
    v = saved - static_cast<T>(opt.step);
    const double down = eval();
    v = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    result.max_rel_error =
        std::max(result.max_rel_error,
                 relative_error(static_cast<double>(analytic[i][j]), numeric,
                                opt.floor));
    ++result.probed;
  }
  return result;
}

/// Seeded tensor with entries drawn uniformly from [lo, hi).
template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, bool requires_grad,
                        double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(shape, std::move(v), requires_grad);
}

/// sum(x * r) for a fixed random r, so every output element carries a
/// distinct weight in the checked scalar.
template <typename T>
Tensor<T> random_projection(Tape<T>& tape, const Tensor<T>& x,
                            std::uint64_t seed) {
  return sum(tape, mul(tape, x, random_tensor<T>(x.shape(), seed, false)));
}

}  // namespace ifwm

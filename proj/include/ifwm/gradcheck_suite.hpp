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

#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ifwm/backbone.hpp"
#include "ifwm/flow_warp.hpp"
#include "ifwm/gradcheck.hpp"
#include "ifwm/ops.hpp"

namespace ifwm {

/// One line of the finite-difference report.
struct GradcheckEntry {
  std::string op;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  std::size_t probed = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

struct GradcheckSuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double tolerance = 1e-4;
  double backbone_tolerance = 1e-3;
  // Coordinates probed per seed in the end-to-end backbone check.
  std::size_t backbone_samples = 40;
  // Test fixture: corrupts the backward rule exercised by this entry only.
  std::string fault_entry;
  double fault_scale = 1.5;
};

/// Report entries in suite order, one per differentiable operation.
inline const std::vector<std::string>& gradcheck_entries() {
  static const std::vector<std::string> names = {
      "conv2d",           "batch_norm",         "relu",
      "bilinear_upsample", "concat",            "slice_channels",
      "add",              "mul",                "sum",
      "softmax_cross_entropy", "compute_warp_map", "grid_sample_bilinear",
      "ifwm_fuse",        "backbone"};
  return names;
}

namespace detail {

/// Tape op whose backward rule the fixture corrupts for a suite entry.
inline std::string fault_target(const std::string& entry) {
  if (entry == "concat") return "concat_channels";
  if (entry == "compute_warp_map" || entry == "backbone") return "conv2d";
  if (entry == "ifwm_fuse") return "grid_sample_bilinear";
  return entry;
}

using G = double;

inline ConvParams<G> random_conv(std::size_t in_c, std::size_t out_c, std::size_t k,
                                 std::size_t stride, std::uint64_t seed) {
  ConvParams<G> p;
  p.stride = stride;
  p.padding = (k - 1) / 2;
  p.weight = random_tensor<G>({out_c, in_c, k, k}, seed, true);
  p.bias = random_tensor<G>({out_c, 1, 1, 1}, seed + 1, true);
  return p;
}

/// Random labels in [0, classes) with roughly one pixel in eight ignored.
inline LabelMap random_label_map(std::size_t n, std::size_t h, std::size_t w,
                                 std::size_t classes, std::uint64_t seed) {
  LabelMap m(n, h, w);
  std::mt19937_64 rng(seed);
  for (auto& v : m.values) {
    v = rng() % 8 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % classes);
  }
  return m;
}

inline WarpHead<G> random_head(FusionVariant v, std::size_t ratio, std::size_t cs,
                               std::size_t cd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto head = make_warp_head<G>(v, ratio, cs, cd, rng);
  // Non-zero biases so every parameter matters.
  std::uint64_t s = seed * 7 + 1;
  for (auto& [name, conv] : head.convs()) {
    if (conv->has_bias()) {
      conv->bias = random_tensor<G>(conv->bias.shape(), s++, true, -0.5, 0.5);
    }
  }
  return head;
}

inline std::vector<Tensor<G>> head_params(WarpHead<G>& head) {
  std::vector<Tensor<G>> out;
  for (auto& [name, conv] : head.convs()) {
    out.push_back(conv->weight);
    if (conv->has_bias()) out.push_back(conv->bias);
  }
  return out;
}

/// Rebinds the head's parameters to `in[first..]` in convs() order.
inline void bind_head(WarpHead<G>& head, std::vector<Tensor<G>>& in, std::size_t first) {
  std::size_t i = first;
  for (auto& [name, conv] : head.convs()) {
    conv->weight = in[i++];
    if (conv->has_bias()) conv->bias = in[i++];
  }
}

inline GradcheckResult check_entry(const std::string& entry, std::uint64_t seed,
                                   const GradcheckOptions& opt,
                                   const GradcheckSuiteOptions& suite) {
  const std::uint64_t s = seed * 1000 + 17;
  constexpr std::size_t kRatios[] = {2, 4, 8};
  if (entry == "conv2d") {
    const std::size_t k = seed % 3 == 2 ? 1 : 3;
    auto p = random_conv(3, 2, k, 1 + seed % 2, s);
    LossFn<G> fn = [p, s](Tape<G>& t, std::vector<Tensor<G>>& in) {
      ConvParams<G> q = p;
      q.weight = in[1];
      q.bias = in[2];
      return random_projection(t, conv2d(t, in[0], q), s + 9);
    };
    return check_gradients<G>(fn, {random_tensor<G>({2, 3, 5, 5}, s + 2, true), p.weight, p.bias},
                              opt);
  }
  if (entry == "batch_norm") {
    const bool training = seed % 4 != 3;
    LossFn<G> fn = [s, training](Tape<G>& t, std::vector<Tensor<G>>& in) {
      auto st = make_batch_norm<G>(3);
      st.scale = in[1];
      st.shift = in[2];
      st.running_mean = random_tensor<G>({3, 1, 1, 1}, s + 5, false);
      st.running_var = random_tensor<G>({3, 1, 1, 1}, s + 6, false, 0.5, 2.0);
      return random_projection(t, batch_norm(t, in[0], st, training), s + 9);
    };
    return check_gradients<G>(fn,
                              {random_tensor<G>({3, 3, 3, 4}, s, true),
                               random_tensor<G>({3, 1, 1, 1}, s + 1, true, 0.5, 1.5),
                               random_tensor<G>({3, 1, 1, 1}, s + 2, true)},
                              opt);
  }
  if (entry == "relu") {
    LossFn<G> fn = [s](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return random_projection(t, relu(t, in[0]), s + 9);
    };
    return check_gradients<G>(fn, {random_tensor<G>({2, 3, 4, 4}, s, true)}, opt);
  }
  if (entry == "bilinear_upsample") {
    const std::size_t f = kRatios[seed % 3];
    LossFn<G> fn = [s, f](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return random_projection(t, bilinear_upsample(t, in[0], f), s + 9);
    };
    return check_gradients<G>(fn, {random_tensor<G>({1, 2, 3, 4}, s, true)}, opt);
  }
  if (entry == "concat") {
    LossFn<G> fn = [s](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return random_projection(t, concat_channels(t, {in[0], in[1], in[2]}), s + 9);
    };
    return check_gradients<G>(fn,
                              {random_tensor<G>({2, 1, 3, 3}, s, true),
                               random_tensor<G>({2, 2, 3, 3}, s + 1, true),
                               random_tensor<G>({2, 3, 3, 3}, s + 2, true)},
                              opt);
  }
  if (entry == "slice_channels") {
    LossFn<G> fn = [s, seed](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return random_projection(t, slice_channels(t, in[0], seed % 3, 2), s + 9);
    };
    return check_gradients<G>(fn, {random_tensor<G>({2, 5, 3, 3}, s, true)}, opt);
  }
  if (entry == "add" || entry == "mul") {
    const bool is_add = entry == "add";
    LossFn<G> fn = [s, is_add](Tape<G>& t, std::vector<Tensor<G>>& in) {
      auto y = is_add ? add(t, in[0], in[1]) : mul(t, in[0], in[1]);
      return random_projection(t, y, s + 9);
    };
    return check_gradients<G>(
        fn, {random_tensor<G>({2, 3, 3, 3}, s, true), random_tensor<G>({2, 3, 3, 3}, s + 1, true)},
        opt);
  }
  if (entry == "sum") {
    LossFn<G> fn = [](Tape<G>& t, std::vector<Tensor<G>>& in) { return sum(t, in[0]); };
    return check_gradients<G>(fn, {random_tensor<G>({2, 3, 3, 3}, s, true)}, opt);
  }
  if (entry == "softmax_cross_entropy") {
    const auto labels = random_label_map(2, 3, 4, 5, s + 3);
    LossFn<G> fn = [labels](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return softmax_cross_entropy(t, in[0], labels);
    };
    return check_gradients<G>(fn, {random_tensor<G>({2, 5, 3, 4}, s, true, -3, 3)}, opt);
  }
  if (entry == "compute_warp_map" || entry == "ifwm_fuse") {
    const std::size_t ratio = kRatios[seed % 3];
    const FusionVariant v =
        entry == "ifwm_fuse" ? FusionVariant::kIFWM
                             : std::vector<FusionVariant>{FusionVariant::kSF, FusionVariant::kLSF,
                                                          FusionVariant::kRIFW,
                                                          FusionVariant::kIFWM}[seed % 4];
    const std::size_t hd = 2, wd = 2;
    auto head = random_head(v, ratio, 3, 4, s);
    std::vector<Tensor<G>> inputs = {
        random_tensor<G>({1, 3, hd * ratio, wd * ratio}, s + 1, true),
        random_tensor<G>({1, 4, hd, wd}, s + 2, true)};
    for (auto& p : head_params(head)) inputs.push_back(p);
    const bool fuse = entry == "ifwm_fuse";
    LossFn<G> fn = [head, s, fuse](Tape<G>& t, std::vector<Tensor<G>>& in) mutable {
      bind_head(head, in, 2);
      auto y = fuse ? ifwm_fuse(t, head, in[0], in[1]) : compute_warp_map(t, head, in[0], in[1]);
      return random_projection(t, y, s + 9);
    };
    return check_gradients<G>(fn, inputs, opt);
  }
  if (entry == "grid_sample_bilinear") {
    const std::size_t ratio = kRatios[seed % 3];
    LossFn<G> fn = [s](Tape<G>& t, std::vector<Tensor<G>>& in) {
      return random_projection(t, grid_sample_bilinear(t, in[0], in[1]), s + 9);
    };
    return check_gradients<G>(fn,
                              {random_tensor<G>({1, 2, 3, 3}, s, true),
                               random_tensor<G>({1, 2, 3 * ratio, 3 * ratio}, s + 1, true, -1.2,
                                                1.2)},
                              opt);
  }
  if (entry == "backbone") {
    NetworkSpec spec;
    spec.stem_channels = 4;
    spec.branch_widths = {4, 6, 6, 8};
    spec.blocks_per_stage = 1;
    spec.fusion = FusionVariant::kIFWM;
    spec.seed = s;
    auto net = std::make_shared<Network<G>>(build_network<G>(spec));
    // Fresh flow heads are zero; give them weights so warping is exercised.
    std::uint64_t ws = s + 100;
    for (const auto& [name, t] : net->registry()) {
      if (name.find("_conv.weight") == std::string::npos) continue;
      Tensor<G> w = t;
      const auto r = random_tensor<G>(t.shape(), ws++, false, -0.3, 0.3);
      std::copy(r.data().begin(), r.data().end(), w.mutable_data().begin());
    }
    const auto img = random_tensor<G>({2, 3, 32, 32}, s + 1, false, 0, 1);
    const auto labels = random_label_map(2, 32, 32, spec.num_classes, s + 2);
    LossFn<G> fn = [net, img, labels](Tape<G>& t, std::vector<Tensor<G>>&) {
      return softmax_cross_entropy(t, net->forward(t, img, true), labels);
    };
    GradcheckOptions o = opt;
    o.sample = suite.backbone_samples;
    o.sample_seed = s + 3;
    return check_gradients<G>(fn, net->parameters(), o);
  }
  throw ContractError("unknown gradcheck entry '" + entry + "'");
}

}  // namespace detail

/// Runs every entry over `seeds` seeds. Inputs are double precision; the
/// step is 1e-6 throughout.
inline std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckSuiteOptions& suite = {}) {
  std::vector<GradcheckEntry> report;
  for (const auto& name : gradcheck_entries()) {
    GradcheckEntry e;
    e.op = name;
    e.tolerance = name == "backbone" ? suite.backbone_tolerance : suite.tolerance;
    e.seeds = suite.seeds;
    GradcheckOptions opt;
    opt.step = 1e-6;
    if (!suite.fault_entry.empty() && suite.fault_entry == name) {
      opt.fault_op = detail::fault_target(name);
      opt.fault_scale = suite.fault_scale;
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t k = 0; k < suite.seeds; ++k) {
      const auto r = detail::check_entry(name, suite.base_seed + k, opt, suite);
      e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
      e.probed += r.probed;
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.push_back(e);
  }
  return report;
}

}  // namespace ifwm

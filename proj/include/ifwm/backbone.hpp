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
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ifwm/error.hpp"
#include "ifwm/flow_warp.hpp"
#include "ifwm/ops.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

/// Declarative description of the four-branch network.
struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> branch_widths{16, 32, 64, 128};
  std::size_t blocks_per_stage = 2;
  std::size_t fusion_stages = 2;
  std::size_t num_classes = 4;
  FusionVariant fusion = FusionVariant::kBaseline;
  std::uint64_t seed = 0;

  static constexpr std::size_t kBranches = 4;
  // Two stride-2 stem convolutions.
  static constexpr std::size_t kStemStride = 4;

  void validate() const {
    if (branch_widths.size() != kBranches) {
      throw ConfigError("network needs exactly 4 branch widths, got " +
                        std::to_string(branch_widths.size()));
    }
    for (std::size_t w : branch_widths) {
      if (w == 0) throw ConfigError("branch widths must be positive");
    }
    if (in_channels == 0 || stem_channels == 0) {
      throw ConfigError("input and stem channels must be positive");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (fusion_stages == 0) throw ConfigError("fusion_stages must be positive");
  }
};

namespace detail {

// Independent, reproducible stream per parameter group so that networks
// differing only in their fusion heads share every other weight.
inline std::mt19937_64 derive_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Branch shapes observed after the stem, each stage and the head.
struct StageTrace {
  std::vector<std::vector<Shape>> stages;
};

template <typename T>
class Network {
 public:
  struct ConvBn {
    ConvParams<T> conv;
    BatchNormState<T> bn;
  };
  struct ResidualBlock {
    ConvBn a;
    ConvBn b;
  };
  /// Shallow -> deep: a chain of stride-2 3x3 convolutions.
  struct DownPath {
    std::vector<ConvBn> steps;
  };
  /// Deep -> shallow: 1x1 projection + up-sampling, optionally steered by a
  /// learned flow field.
  struct UpPath {
    std::size_t ratio = 2;
    ConvParams<T> channel_proj;  // used by baseline fusion
    WarpHead<T> warp;            // used by the flow variants
  };
  struct Stage {
    std::vector<std::vector<ResidualBlock>> blocks;  // [branch][block]
    std::map<std::pair<std::size_t, std::size_t>, DownPath> down;  // (from, to)
    std::map<std::pair<std::size_t, std::size_t>, UpPath> up;      // (from, to)
  };

  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    build();
  }

  // Parameters are shared handles; a copy would alias them.
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const NetworkSpec& spec() const { return spec_; }

  /// Logits (n, num_classes, H, W) for an (n, in_channels, H, W) image batch.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& image, bool training,
                    StageTrace* trace = nullptr) {
    const Shape s = image.shape();
    const std::size_t coarsest = NetworkSpec::kStemStride << (NetworkSpec::kBranches - 1);
    if (s.c != spec_.in_channels) {
      throw ChannelError("forward: image has " + std::to_string(s.c) +
                         " channels, network expects " +
                         std::to_string(spec_.in_channels));
    }
    if (s.h == 0 || s.w == 0 || s.h % coarsest != 0 || s.w % coarsest != 0) {
      throw GeometryError("forward: image extents " + s.str() +
                          " must be positive multiples of " +
                          std::to_string(coarsest));
    }

    Tensor<T> x = conv_bn(tape, image, stem_[0], training, true);
    x = conv_bn(tape, x, stem_[1], training, true);

    std::vector<Tensor<T>> branch(NetworkSpec::kBranches);
    branch[0] = conv_bn(tape, x, transition_[0], training, true);
    for (std::size_t i = 1; i < NetworkSpec::kBranches; ++i) {
      branch[i] = conv_bn(tape, branch[i - 1], transition_[i], training, true);
    }
    if (trace != nullptr) record_trace(*trace, branch);

    for (Stage& stage : stages_) {
      for (std::size_t i = 0; i < NetworkSpec::kBranches; ++i) {
        for (ResidualBlock& blk : stage.blocks[i]) {
          branch[i] = residual(tape, branch[i], blk, training);
        }
      }
      branch = fuse(tape, stage, branch, training);
      if (trace != nullptr) record_trace(*trace, branch);
    }

    std::vector<Tensor<T>> aligned;
    for (std::size_t i = 0; i < NetworkSpec::kBranches; ++i) {
      aligned.push_back(i == 0 ? branch[0]
                               : bilinear_upsample(tape, branch[i], std::size_t{1} << i));
    }
    Tensor<T> logits = conv2d(tape, concat_channels(tape, aligned), head_);
    return bilinear_upsample(tape, logits, NetworkSpec::kStemStride);
  }

  /// Learnable tensors in registration order; names are unique.
  const std::vector<std::pair<std::string, Tensor<T>>>& registry() const {
    return params_;
  }
  /// Non-learnable state (batch-norm running statistics).
  const std::vector<std::pair<std::string, Tensor<T>>>& buffers() const {
    return buffers_;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : params_) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  /// Looks up a parameter or buffer by name.
  Tensor<T> find(const std::string& name) const {
    for (const auto* list : {&params_, &buffers_}) {
      for (const auto& [n, t] : *list) {
        if (n == name) return t;
      }
    }
    return {};
  }

  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  ConvBn make_conv_bn(const std::string& name, std::size_t in_c,
                      std::size_t out_c, std::size_t k, std::size_t stride) {
    auto rng = detail::derive_rng(spec_.seed, name);
    ConvBn cb{make_conv<T>(in_c, out_c, k, stride, false, rng),
              make_batch_norm<T>(out_c)};
    add_param(name + ".conv.weight", cb.conv.weight);
    add_param(name + ".bn.scale", cb.bn.scale);
    add_param(name + ".bn.shift", cb.bn.shift);
    buffers_.emplace_back(name + ".bn.running_mean", cb.bn.running_mean);
    buffers_.emplace_back(name + ".bn.running_var", cb.bn.running_var);
    return cb;
  }

  void add_param(const std::string& name, const Tensor<T>& t) {
    params_.emplace_back(name, t);
  }

  void add_conv(const std::string& name, const ConvParams<T>& p) {
    add_param(name + ".weight", p.weight);
    if (p.has_bias()) add_param(name + ".bias", p.bias);
  }

  void build() {
    const auto& w = spec_.branch_widths;
    stem_.push_back(make_conv_bn("stem.0", spec_.in_channels, spec_.stem_channels, 3, 2));
    stem_.push_back(make_conv_bn("stem.1", spec_.stem_channels, spec_.stem_channels, 3, 2));
    transition_.push_back(make_conv_bn("transition.0", spec_.stem_channels, w[0], 3, 1));
    for (std::size_t i = 1; i < NetworkSpec::kBranches; ++i) {
      transition_.push_back(
          make_conv_bn("transition." + std::to_string(i), w[i - 1], w[i], 3, 2));
    }

    for (std::size_t s = 0; s < spec_.fusion_stages; ++s) {
      const std::string sp = "stage" + std::to_string(s);
      Stage stage;
      stage.blocks.resize(NetworkSpec::kBranches);
      for (std::size_t i = 0; i < NetworkSpec::kBranches; ++i) {
        for (std::size_t b = 0; b < spec_.blocks_per_stage; ++b) {
          const std::string bp =
              sp + ".branch" + std::to_string(i) + ".block" + std::to_string(b);
          stage.blocks[i].push_back(ResidualBlock{make_conv_bn(bp + ".a", w[i], w[i], 3, 1),
                                                  make_conv_bn(bp + ".b", w[i], w[i], 3, 1)});
        }
      }
      for (std::size_t to = 0; to < NetworkSpec::kBranches; ++to) {
        for (std::size_t from = 0; from < NetworkSpec::kBranches; ++from) {
          if (from == to) continue;
          const std::string fp =
              sp + ".fuse" + std::to_string(from) + "to" + std::to_string(to);
          if (from < to) {
            DownPath path;
            for (std::size_t step = 0; step < to - from; ++step) {
              const bool last = step + 1 == to - from;
              path.steps.push_back(make_conv_bn(fp + "." + std::to_string(step), w[from],
                                                last ? w[to] : w[from], 3, 2));
            }
            stage.down.emplace(std::make_pair(from, to), std::move(path));
          } else {
            UpPath path;
            path.ratio = std::size_t{1} << (from - to);
            auto rng = detail::derive_rng(spec_.seed, fp + ".channel_proj");
            path.channel_proj = make_conv<T>(w[from], w[to], 1, 1, true, rng);
            add_conv(fp + ".channel_proj", path.channel_proj);
            if (spec_.fusion != FusionVariant::kBaseline) {
              auto wrng = detail::derive_rng(spec_.seed, fp + ".warp");
              path.warp = make_warp_head<T>(spec_.fusion, path.ratio, w[to], w[from], wrng);
              // Share the projection with the baseline layout.
              path.warp.channel_proj = path.channel_proj;
              // Flow convs start at zero: an untrained head samples without
              // offset and reproduces the baseline fusion.
              for (auto& [name, conv] : path.warp.convs()) {
                if (name == "channel_proj") continue;
                for (auto& v : conv->weight.mutable_data()) v = T(0);
                add_conv(fp + "." + name, *conv);
              }
            }
            stage.up.emplace(std::make_pair(from, to), std::move(path));
          }
        }
      }
      stages_.push_back(std::move(stage));
    }

    std::size_t concat_c = 0;
    for (std::size_t v : w) concat_c += v;
    auto rng = detail::derive_rng(spec_.seed, "head");
    head_ = make_conv<T>(concat_c, spec_.num_classes, 1, 1, true, rng);
    add_conv("head.conv", head_);
  }

  static Tensor<T> conv_bn(Tape<T>& tape, const Tensor<T>& x, ConvBn& cb,
                           bool training, bool activate) {
    Tensor<T> y = batch_norm(tape, conv2d(tape, x, cb.conv), cb.bn, training);
    return activate ? relu(tape, y) : y;
  }

  static Tensor<T> residual(Tape<T>& tape, const Tensor<T>& x,
                            ResidualBlock& blk, bool training) {
    Tensor<T> y = conv_bn(tape, x, blk.a, training, true);
    y = conv_bn(tape, y, blk.b, training, false);
    return relu(tape, add(tape, y, x));
  }

  std::vector<Tensor<T>> fuse(Tape<T>& tape, Stage& stage,
                              const std::vector<Tensor<T>>& in, bool training) {
    std::vector<Tensor<T>> out(in.size());
    for (std::size_t to = 0; to < in.size(); ++to) {
      Tensor<T> acc = in[to];
      for (std::size_t from = 0; from < in.size(); ++from) {
        if (from == to) continue;
        Tensor<T> term;
        if (from < to) {
          DownPath& path = stage.down.at({from, to});
          term = in[from];
          for (std::size_t step = 0; step < path.steps.size(); ++step) {
            const bool last = step + 1 == path.steps.size();
            term = conv_bn(tape, term, path.steps[step], training, !last);
          }
        } else {
          UpPath& path = stage.up.at({from, to});
          if (spec_.fusion == FusionVariant::kBaseline) {
            term = bilinear_upsample(tape, conv2d(tape, in[from], path.channel_proj),
                                     path.ratio);
          } else {
            term = warp_deep_feature(tape, path.warp, in[to], in[from]);
          }
        }
        acc = add(tape, acc, term);
      }
      out[to] = relu(tape, acc);
    }
    return out;
  }

  static void record_trace(StageTrace& trace, const std::vector<Tensor<T>>& branch) {
    std::vector<Shape> shapes;
    for (const auto& b : branch) shapes.push_back(b.shape());
    trace.stages.push_back(std::move(shapes));
  }

  NetworkSpec spec_;
  std::vector<ConvBn> stem_;
  std::vector<ConvBn> transition_;
  std::vector<Stage> stages_;
  ConvParams<T> head_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
};

template <typename T>
Network<T> build_network(const NetworkSpec& spec) {
  return Network<T>(spec);
}

}  // namespace ifwm

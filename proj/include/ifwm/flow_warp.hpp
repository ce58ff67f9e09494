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

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ifwm/error.hpp"
#include "ifwm/ops.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

/// How a deep (low-resolution) feature is merged into a shallow one.
///
/// kBaseline is the plain HRNet fusion (1x1 conv + bilinear up-sampling).
/// The other four compute a flow field first and differ only in how:
///   SF    concat + conv, 3x3
///   LSF   concat + conv, kxk
///   RIFW  conv + add,    3x3 on shallow + kxk on deep
///   IFWM  conv + add,    1x1 on shallow + kxk on deep
enum class FusionVariant { kBaseline, kSF, kLSF, kRIFW, kIFWM };

inline constexpr FusionVariant kAllVariants[] = {
    FusionVariant::kBaseline, FusionVariant::kSF, FusionVariant::kLSF,
    FusionVariant::kRIFW, FusionVariant::kIFWM};

inline std::string_view variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::kBaseline: return "baseline";
    case FusionVariant::kSF: return "sf";
    case FusionVariant::kLSF: return "lsf";
    case FusionVariant::kRIFW: return "rifw";
    case FusionVariant::kIFWM: return "ifwm";
  }
  return "?";
}

inline FusionVariant parse_variant(std::string_view s) {
  for (FusionVariant v : kAllVariants) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown fusion variant '" + std::string(s) +
                    "' (expected baseline|sf|lsf|rifw|ifwm)");
}

/// Table-style label of how the warp map is calculated.
inline std::string_view calc_process(FusionVariant v) {
  switch (v) {
    case FusionVariant::kBaseline: return "none";
    case FusionVariant::kSF:
    case FusionVariant::kLSF: return "concat+conv";
    case FusionVariant::kRIFW:
    case FusionVariant::kIFWM: return "conv+add";
  }
  return "?";
}

inline std::string_view kernel_label(FusionVariant v) {
  switch (v) {
    case FusionVariant::kBaseline: return "none";
    case FusionVariant::kSF: return "3x3";
    case FusionVariant::kLSF: return "kxk";
    case FusionVariant::kRIFW: return "3x3+kxk";
    case FusionVariant::kIFWM: return "1x1+kxk";
  }
  return "?";
}

/// Region-conv kernel size for a deep/shallow scale ratio: 3, 7, 15 for
/// 2x, 4x, 8x up-sampling.
inline std::size_t kernel_size_for_ratio(std::size_t ratio) {
  switch (ratio) {
    case 2: return 3;
    case 4: return 7;
    case 8: return 15;
    default:
      throw ContractError("kernel_size_for_ratio: unsupported ratio " +
                          std::to_string(ratio) + " (expected 2, 4 or 8)");
  }
}

/// Parameters of one deep->shallow alignment site.
///
/// conv+add variants use pixel_conv on the shallow feature and region_conv on
/// the deep one. concat+conv variants use concat_conv over
/// [shallow, up-sampled projected deep]. channel_proj maps the deep feature's
/// channels onto the shallow feature's before sampling.
template <typename T>
struct WarpHead {
  FusionVariant variant = FusionVariant::kIFWM;
  std::size_t ratio = 2;
  ConvParams<T> pixel_conv;
  ConvParams<T> region_conv;
  ConvParams<T> concat_conv;
  ConvParams<T> channel_proj;

  /// (name, conv) pairs of the defined convolutions.
  std::vector<std::pair<std::string, ConvParams<T>*>> convs() {
    std::vector<std::pair<std::string, ConvParams<T>*>> out;
    if (pixel_conv.weight.defined()) out.emplace_back("pixel_conv", &pixel_conv);
    if (region_conv.weight.defined()) out.emplace_back("region_conv", &region_conv);
    if (concat_conv.weight.defined()) out.emplace_back("concat_conv", &concat_conv);
    if (channel_proj.weight.defined()) out.emplace_back("channel_proj", &channel_proj);
    return out;
  }
};

template <typename T, typename Rng>
WarpHead<T> make_warp_head(FusionVariant variant, std::size_t ratio,
                           std::size_t shallow_c, std::size_t deep_c,
                           Rng& rng) {
  if (variant == FusionVariant::kBaseline) {
    throw ContractError("make_warp_head: baseline fusion has no warp head");
  }
  const std::size_t k = kernel_size_for_ratio(ratio);
  WarpHead<T> h;
  h.variant = variant;
  h.ratio = ratio;
  h.channel_proj = make_conv<T>(deep_c, shallow_c, 1, 1, true, rng);
  switch (variant) {
    case FusionVariant::kSF:
      h.concat_conv = make_conv<T>(2 * shallow_c, 2, 3, 1, true, rng);
      break;
    case FusionVariant::kLSF:
      h.concat_conv = make_conv<T>(2 * shallow_c, 2, k, 1, true, rng);
      break;
    case FusionVariant::kRIFW:
      h.pixel_conv = make_conv<T>(shallow_c, 2, 3, 1, true, rng);
      h.region_conv = make_conv<T>(deep_c, 2, k, 1, true, rng);
      break;
    case FusionVariant::kIFWM:
      h.pixel_conv = make_conv<T>(shallow_c, 2, 1, 1, true, rng);
      h.region_conv = make_conv<T>(deep_c, 2, k, 1, true, rng);
      break;
    case FusionVariant::kBaseline:
      break;
  }
  return h;
}

namespace detail {

template <typename T>
void check_pair(const WarpHead<T>& head, const Tensor<T>& xs,
                const Tensor<T>& xd) {
  const Shape s = xs.shape();
  const Shape d = xd.shape();
  if (s.n != d.n) {
    throw GeometryError("warp: batch mismatch " + s.str() + " vs " + d.str());
  }
  if (d.h * head.ratio != s.h || d.w * head.ratio != s.w) {
    throw GeometryError("warp: deep extents " + d.str() + " times ratio " +
                        std::to_string(head.ratio) +
                        " do not match shallow extents " + s.str());
  }
}

// `proj` is channel_proj(xd) when the caller already has it.
template <typename T>
Tensor<T> warp_map_impl(Tape<T>& tape, const WarpHead<T>& head,
                        const Tensor<T>& xs, const Tensor<T>& xd,
                        const Tensor<T>* proj) {
  check_pair(head, xs, xd);
  switch (head.variant) {
    case FusionVariant::kRIFW:
    case FusionVariant::kIFWM: {
      Tensor<T> shallow = conv2d(tape, xs, head.pixel_conv);
      Tensor<T> deep = conv2d(tape, xd, head.region_conv);
      return add(tape, shallow, bilinear_upsample(tape, deep, head.ratio));
    }
    case FusionVariant::kSF:
    case FusionVariant::kLSF: {
      Tensor<T> projected =
          proj != nullptr ? *proj : conv2d(tape, xd, head.channel_proj);
      Tensor<T> up = bilinear_upsample(tape, projected, head.ratio);
      return conv2d(tape, concat_channels(tape, std::vector<Tensor<T>>{xs, up}),
                    head.concat_conv);
    }
    case FusionVariant::kBaseline:
      break;
  }
  throw ContractError("compute_warp_map: baseline head");
}

}  // namespace detail

/// Flow field (n, 2, Hs, Ws) from a shallow/deep feature pair. Channel 0 is
/// the horizontal offset, channel 1 the vertical one, both in deep-feature
/// pixels.
template <typename T>
Tensor<T> compute_warp_map(Tape<T>& tape, const WarpHead<T>& head,
                           const Tensor<T>& xs, const Tensor<T>& xd) {
  return detail::warp_map_impl<T>(tape, head, xs, xd, nullptr);
}

namespace detail {

struct SampleTap {
  std::size_t i0;
  std::size_t i1;
  double frac;
  bool clamped;
};

// Border-clamped source coordinate along one axis.
inline SampleTap sample_tap(double coord, std::size_t extent) {
  const double hi = static_cast<double>(extent - 1);
  SampleTap t{0, 0, 0.0, false};
  if (coord < 0.0) {
    coord = 0.0;
    t.clamped = true;
  } else if (coord > hi) {
    coord = hi;
    t.clamped = true;
  }
  t.i0 = static_cast<std::size_t>(std::floor(coord));
  if (t.i0 > extent - 1) t.i0 = extent - 1;
  t.i1 = std::min(t.i0 + 1, extent - 1);
  t.frac = coord - static_cast<double>(t.i0);
  return t;
}

}  // namespace detail

/// Samples `source` at every pixel of the flow field's grid.
///
/// Output pixel (x, y) maps to the source point
///   ((x + 0.5) * Ws/Wo - 0.5 + dx, (y + 0.5) * Hs/Ho - 0.5 + dy),
/// which is clamped into the source rectangle and read with bilinear weights
/// from its four neighbouring pixels. Differentiable w.r.t. source and flow.
template <typename T>
Tensor<T> grid_sample_bilinear(Tape<T>& tape, const Tensor<T>& source,
                               const Tensor<T>& flow) {
  const Shape s = source.shape();
  const Shape f = flow.shape();
  if (f.c != 2) {
    throw ChannelError("grid_sample: flow must have 2 channels, got " +
                       std::to_string(f.c));
  }
  if (f.n != s.n) {
    throw GeometryError("grid_sample: batch mismatch " + s.str() + " vs " +
                        f.str());
  }
  const Shape os{s.n, s.c, f.h, f.w};
  const double sx = static_cast<double>(s.w) / static_cast<double>(f.w);
  const double sy = static_cast<double>(s.h) / static_cast<double>(f.h);

  std::vector<detail::SampleTap> tx(s.n * f.plane()), ty(s.n * f.plane());
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* fx = flow.data().data() + (b * 2) * f.plane();
    const T* fy = fx + f.plane();
    for (std::size_t y = 0; y < f.h; ++y) {
      for (std::size_t x = 0; x < f.w; ++x) {
        const std::size_t i = y * f.w + x;
        const double bx = (static_cast<double>(x) + 0.5) * sx - 0.5;
        const double by = (static_cast<double>(y) + 0.5) * sy - 0.5;
        tx[b * f.plane() + i] = detail::sample_tap(bx + static_cast<double>(fx[i]), s.w);
        ty[b * f.plane() + i] = detail::sample_tap(by + static_cast<double>(fy[i]), s.h);
      }
    }
  }

  Tensor<T> out(os);
  auto od = out.mutable_data();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = source.data().data() + (b * s.c + c) * s.plane();
      T* dst = od.data() + (b * s.c + c) * f.plane();
      for (std::size_t i = 0; i < f.plane(); ++i) {
        const auto& ax = tx[b * f.plane() + i];
        const auto& ay = ty[b * f.plane() + i];
        const T lx = static_cast<T>(ax.frac);
        const T ly = static_cast<T>(ay.frac);
        const T top = (T(1) - lx) * src[ay.i0 * s.w + ax.i0] + lx * src[ay.i0 * s.w + ax.i1];
        const T bot = (T(1) - lx) * src[ay.i1 * s.w + ax.i0] + lx * src[ay.i1 * s.w + ax.i1];
        dst[i] = (T(1) - ly) * top + ly * bot;
      }
    }
  }

  if (tape.wants({&source, &flow})) {
    tape.record(
        "grid_sample_bilinear", {source, flow}, out,
        [source, flow, out, tx, ty]() mutable {
          const Shape s = source.shape();
          const Shape f = flow.shape();
          auto g = out.grad();
          T* dsrc = source.requires_grad() ? source.ensure_grad().data() : nullptr;
          T* dflow = flow.requires_grad() ? flow.ensure_grad().data() : nullptr;
          for (std::size_t b = 0; b < s.n; ++b) {
            for (std::size_t c = 0; c < s.c; ++c) {
              const T* src = source.data().data() + (b * s.c + c) * s.plane();
              const T* gc = g.data() + (b * s.c + c) * f.plane();
              for (std::size_t i = 0; i < f.plane(); ++i) {
                const auto& ax = tx[b * f.plane() + i];
                const auto& ay = ty[b * f.plane() + i];
                const T lx = static_cast<T>(ax.frac);
                const T ly = static_cast<T>(ay.frac);
                const T gv = gc[i];
                if (dsrc != nullptr) {
                  T* d = dsrc + (b * s.c + c) * s.plane();
                  d[ay.i0 * s.w + ax.i0] += (T(1) - ly) * (T(1) - lx) * gv;
                  d[ay.i0 * s.w + ax.i1] += (T(1) - ly) * lx * gv;
                  d[ay.i1 * s.w + ax.i0] += ly * (T(1) - lx) * gv;
                  d[ay.i1 * s.w + ax.i1] += ly * lx * gv;
                }
                if (dflow != nullptr) {
                  const T v00 = src[ay.i0 * s.w + ax.i0];
                  const T v01 = src[ay.i0 * s.w + ax.i1];
                  const T v10 = src[ay.i1 * s.w + ax.i0];
                  const T v11 = src[ay.i1 * s.w + ax.i1];
                  T* dfx = dflow + (b * 2) * f.plane();
                  T* dfy = dfx + f.plane();
                  if (!ax.clamped) {
                    dfx[i] += gv * ((T(1) - ly) * (v01 - v00) + ly * (v11 - v10));
                  }
                  if (!ay.clamped) {
                    dfy[i] += gv * ((T(1) - lx) * (v10 - v00) + lx * (v11 - v01));
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

/// The deep feature projected onto the shallow channels and sampled along
/// the learned flow, at shallow resolution.
template <typename T>
Tensor<T> warp_deep_feature(Tape<T>& tape, const WarpHead<T>& head,
                            const Tensor<T>& xs, const Tensor<T>& xd) {
  Tensor<T> proj = conv2d(tape, xd, head.channel_proj);
  Tensor<T> flow = detail::warp_map_impl(tape, head, xs, xd, &proj);
  return grid_sample_bilinear(tape, proj, flow);
}

/// xs + grid_sample(channel_proj(xd), warp_map(xs, xd)).
template <typename T>
Tensor<T> ifwm_fuse(Tape<T>& tape, const WarpHead<T>& head,
                    const Tensor<T>& xs, const Tensor<T>& xd) {
  if (head.channel_proj.out_channels() != xs.shape().c) {
    throw ChannelError("ifwm_fuse: projection yields " +
                       std::to_string(head.channel_proj.out_channels()) +
                       " channels, shallow feature has " +
                       std::to_string(xs.shape().c));
  }
  return add(tape, xs, warp_deep_feature(tape, head, xs, xd));
}

}  // namespace ifwm

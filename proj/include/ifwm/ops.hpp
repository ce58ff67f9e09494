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

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "ifwm/error.hpp"
#include "ifwm/labels.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* op) {
  if (!(a == b)) {
    throw GeometryError(std::string(op) + ": shape " + a.str() +
                        " does not match " + b.str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Square-kernel convolution parameters. `bias` may be left undefined for
/// convolutions that feed a normalization layer.
template <typename T>
struct ConvParams {
  Tensor<T> weight;  // (out_c, in_c, k, k)
  Tensor<T> bias;    // (out_c, 1, 1, 1)
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t kernel() const { return weight.shape().h; }
  bool has_bias() const { return bias.defined(); }
};

/// Kaiming-normal (fan-in) initialised convolution with "same" padding at
/// stride 1. Bias starts at zero.
template <typename T, typename Rng>
ConvParams<T> make_conv(std::size_t in_c, std::size_t out_c, std::size_t k,
                        std::size_t stride, bool with_bias, Rng& rng) {
  if (k % 2 == 0) throw ContractError("convolution kernels must be odd");
  ConvParams<T> p;
  p.stride = stride;
  p.padding = (k - 1) / 2;
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<T> w(out_c * in_c * k * k);
  for (auto& v : w) v = static_cast<T>(dist(rng));
  p.weight = Tensor<T>::from({out_c, in_c, k, k}, std::move(w), true);
  if (with_bias) p.bias = Tensor<T>({out_c, 1, 1, 1}, T(0), true);
  return p;
}

namespace detail {

/// Output columns [lo, hi) whose input column ox*stride + kx - pad lies
/// inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t w, std::size_t ow,
                                                      std::size_t kx, std::size_t stride,
                                                      std::size_t pad) {
  std::size_t lo = 0;
  if (pad > kx) lo = (pad - kx + stride - 1) / stride;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(w + pad) -
                              static_cast<std::ptrdiff_t>(kx) - 1;
  if (last < 0) return {0, 0};
  const std::size_t hi = std::min(ow, static_cast<std::size_t>(last) / stride + 1);
  return {std::min(lo, hi), hi};
}

/// Kernel taps that can reach the input: rows [y0, y1) and columns
/// [x0, x1) of a k x k kernel. Large kernels on small maps touch only a
/// few taps; the rest always read padding.
struct TapWindow {
  std::size_t k = 1;
  std::size_t y0 = 0, y1 = 1, x0 = 0, x1 = 1;

  std::size_t taps() const { return (y1 - y0) * (x1 - x0); }
  bool full() const { return y0 == 0 && x0 == 0 && y1 == k && x1 == k; }
};

inline std::pair<std::size_t, std::size_t> live_taps(std::size_t in, std::size_t out,
                                                     std::size_t k, std::size_t stride,
                                                     std::size_t pad) {
  const std::size_t reach = (out - 1) * stride;
  const std::size_t t0 = pad > reach ? pad - reach : 0;
  const std::size_t t1 = std::min(k, in + pad);
  return {std::min(t0, t1), t1};
}

inline TapWindow tap_window(std::size_t h, std::size_t w, std::size_t oh, std::size_t ow,
                            std::size_t k, std::size_t stride, std::size_t pad) {
  TapWindow t;
  t.k = k;
  std::tie(t.y0, t.y1) = live_taps(h, oh, k, stride, pad);
  std::tie(t.x0, t.x1) = live_taps(w, ow, k, stride, pad);
  return t;
}

/// Writes the in-bounds values of each (channel, tap) row of the column
/// matrix; padding positions are left untouched, so `col` must arrive
/// zeroed. Rows are ordered channel-major over the window's taps.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w,
            const TapWindow& win, std::size_t stride, std::size_t pad, std::size_t oh,
            std::size_t ow, T* col, std::size_t pitch) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h);
  std::size_t r = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = win.y0; ky < win.y1; ++ky) {
      for (std::size_t kx = win.x0; kx < win.x1; ++kx, ++r) {
        T* row = col + r * pitch;
        const auto [lo, hi] = valid_span(w, ow, kx, stride, pad);
        if (lo >= hi) continue;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= ih) continue;
          T* dst = row + oy * ow;
          const T* src = img + (c * h + static_cast<std::size_t>(y)) * w;
          if (stride == 1) {
            std::copy(src + (lo + kx - pad), src + (hi + kx - pad), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + kx - pad];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w,
                const TapWindow& win, std::size_t stride, std::size_t pad, std::size_t oh,
                std::size_t ow, T* img, std::size_t pitch) {
  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(h);
  std::size_t r = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = win.y0; ky < win.y1; ++ky) {
      for (std::size_t kx = win.x0; kx < win.x1; ++kx, ++r) {
        const T* row = col + r * pitch;
        const auto [lo, hi] = valid_span(w, ow, kx, stride, pad);
        if (lo >= hi) continue;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                   static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= ih) continue;
          T* dst = img + (c * h + static_cast<std::size_t>(y)) * w;
          const T* src = row + oy * ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * stride + kx - pad] += src[ox];
        }
      }
    }
  }
}

inline std::size_t conv_extent(std::size_t in, std::size_t k,
                               std::size_t stride, std::size_t pad) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * pad) -
                              static_cast<std::ptrdiff_t>(k);
  if (stride == 0 || span < 0) {
    throw GeometryError("conv2d: kernel " + std::to_string(k) +
                        " does not fit extent " + std::to_string(in) +
                        " with padding " + std::to_string(pad));
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

}  // namespace detail

namespace detail {

/// Columns of the (out, in*k*k) weight matrix that belong to `win`.
template <typename T>
RowMat<T> live_weight(const Tensor<T>& weight, const TapWindow& win) {
  const Shape ws = weight.shape();
  const std::size_t k = win.k;
  ConstMapMat<T> full(weight.data().data(), ws.n, ws.c * k * k);
  if (win.full()) return full;
  RowMat<T> out(ws.n, ws.c * win.taps());
  for (std::size_t o = 0; o < ws.n; ++o) {
    std::size_t r = 0;
    for (std::size_t c = 0; c < ws.c; ++c) {
      for (std::size_t ky = win.y0; ky < win.y1; ++ky) {
        for (std::size_t kx = win.x0; kx < win.x1; ++kx, ++r) {
          out(o, r) = full(o, (c * k + ky) * k + kx);
        }
      }
    }
  }
  return out;
}

template <typename T>
void scatter_live_weight(const RowMat<T>& live, const TapWindow& win, std::span<T> grad) {
  const std::size_t k = win.k;
  const std::size_t in_c = static_cast<std::size_t>(live.cols()) / win.taps();
  const std::size_t patch = in_c * k * k;
  for (Eigen::Index o = 0; o < live.rows(); ++o) {
    std::size_t r = 0;
    for (std::size_t c = 0; c < in_c; ++c) {
      for (std::size_t ky = win.y0; ky < win.y1; ++ky) {
        for (std::size_t kx = win.x0; kx < win.x1; ++kx, ++r) {
          grad[static_cast<std::size_t>(o) * patch + (c * k + ky) * k + kx] +=
              live(o, static_cast<Eigen::Index>(r));
        }
      }
    }
  }
}

/// Images per GEMM: enough to give small feature maps wide products while
/// keeping the column matrix cache-sized.
inline std::size_t conv_chunk(std::size_t batch, std::size_t patch, std::size_t pixels) {
  constexpr std::size_t kTargetColumns = 1024;
  constexpr std::size_t kMaxColumnElements = std::size_t{1} << 19;
  std::size_t chunk = kTargetColumns / std::max<std::size_t>(pixels, 1);
  chunk = std::min(chunk, kMaxColumnElements / std::max<std::size_t>(patch * pixels, 1));
  return std::clamp<std::size_t>(chunk, 1, batch);
}

}  // namespace detail

/// 2-D cross-correlation via im2col + GEMM. Images are processed in chunks
/// sharing one column matrix of shape (c*k*k, chunk*oh*ow).
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const ConvParams<T>& p) {
  const Shape xs = x.shape();
  const Shape ws = p.weight.shape();
  if (xs.c != ws.c) {
    throw ChannelError("conv2d: input has " + std::to_string(xs.c) +
                       " channels, weight expects " + std::to_string(ws.c));
  }
  if (ws.h != ws.w) throw ContractError("conv2d: kernel must be square");
  const std::size_t k = ws.h;
  const std::size_t oh = detail::conv_extent(xs.h, k, p.stride, p.padding);
  const std::size_t ow = detail::conv_extent(xs.w, k, p.stride, p.padding);
  const std::size_t out_c = ws.n;
  const std::size_t pixels = oh * ow;
  const std::size_t in_plane = xs.c * xs.plane();
  const detail::TapWindow win =
      detail::tap_window(xs.h, xs.w, oh, ow, k, p.stride, p.padding);
  const std::size_t patch = xs.c * win.taps();
  const std::size_t chunk = detail::conv_chunk(xs.n, patch, pixels);
  // Weight restricted to the live taps, (out_c, patch).
  auto wlive = std::make_shared<detail::RowMat<T>>(detail::live_weight(p.weight, win));

  Tensor<T> out({xs.n, out_c, oh, ow});
  {
    const detail::RowMat<T>& wmat = *wlive;
    std::vector<T> col(patch * chunk * pixels);
    detail::RowMat<T> prod;
    auto o = out.mutable_data();
    for (std::size_t b0 = 0; b0 < xs.n; b0 += chunk) {
      const std::size_t nb = std::min(chunk, xs.n - b0);
      const std::size_t cols = nb * pixels;
      if (b0 > 0) std::fill(col.begin(), col.end(), T(0));
      for (std::size_t j = 0; j < nb; ++j) {
        detail::im2col(x.data().data() + (b0 + j) * in_plane, xs.c, xs.h, xs.w, win,
                       p.stride, p.padding, oh, ow, col.data() + j * pixels, cols);
      }
      prod.noalias() = wmat * detail::ConstMapMat<T>(col.data(), patch, cols);
      for (std::size_t j = 0; j < nb; ++j) {
        for (std::size_t c = 0; c < out_c; ++c) {
          const T bias = p.has_bias() ? p.bias.data()[c] : T(0);
          const T* src = prod.data() + c * cols + j * pixels;
          T* dst = o.data() + ((b0 + j) * out_c + c) * pixels;
          for (std::size_t i = 0; i < pixels; ++i) dst[i] = src[i] + bias;
        }
      }
    }
  }

  if (tape.wants({&x, &p.weight, &p.bias})) {
    tape.record(
        "conv2d", {x, p.weight, p.bias}, out,
        [x, p, out, win, wlive, oh, ow, patch, pixels, in_plane, chunk]() mutable {
          const Shape xs = x.shape();
          const std::size_t out_c = p.out_channels();
          const detail::RowMat<T>& wmat = *wlive;
          std::vector<T> col(patch * chunk * pixels);
          detail::RowMat<T> g, dcol, dw_live;
          if (p.weight.requires_grad()) {
            dw_live.setZero(static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(patch));
          }
          const T* og = out.grad().data();
          for (std::size_t b0 = 0; b0 < xs.n; b0 += chunk) {
            const std::size_t nb = std::min(chunk, xs.n - b0);
            const std::size_t cols = nb * pixels;
            // Output gradient regrouped to (out_c, nb*pixels).
            g.resize(static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(cols));
            for (std::size_t j = 0; j < nb; ++j) {
              for (std::size_t c = 0; c < out_c; ++c) {
                const T* src = og + ((b0 + j) * out_c + c) * pixels;
                std::copy(src, src + pixels, g.data() + c * cols + j * pixels);
              }
            }
            if (p.weight.requires_grad()) {
              std::fill(col.begin(), col.end(), T(0));
              for (std::size_t j = 0; j < nb; ++j) {
                detail::im2col(x.data().data() + (b0 + j) * in_plane, xs.c, xs.h, xs.w, win,
                               p.stride, p.padding, oh, ow, col.data() + j * pixels, cols);
              }
              dw_live.noalias() +=
                  g * detail::ConstMapMat<T>(col.data(), patch, cols).transpose();
            }
            if (p.has_bias() && p.bias.requires_grad()) {
              auto db = p.bias.ensure_grad();
              for (std::size_t o = 0; o < out_c; ++o) db[o] += g.row(o).sum();
            }
            if (x.requires_grad()) {
              dcol.noalias() = wmat.transpose() * g;
              T* dx = x.ensure_grad().data();
              for (std::size_t j = 0; j < nb; ++j) {
                detail::col2im_add(dcol.data() + j * pixels, xs.c, xs.h, xs.w, win, p.stride,
                                   p.padding, oh, ow, dx + (b0 + j) * in_plane, cols);
              }
            }
          }
          if (p.weight.requires_grad()) detail::scatter_live_weight(dw_live, win, p.weight.ensure_grad());
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormState {
  Tensor<T> scale;         // (c,1,1,1), learnable
  Tensor<T> shift;         // (c,1,1,1), learnable
  Tensor<T> running_mean;  // (c,1,1,1), buffer
  Tensor<T> running_var;   // (c,1,1,1), buffer
  T eps = T(1e-5);
  T momentum = T(0.1);

  std::size_t channels() const { return scale.shape().n; }
};

template <typename T>
BatchNormState<T> make_batch_norm(std::size_t channels) {
  BatchNormState<T> s;
  s.scale = Tensor<T>({channels, 1, 1, 1}, T(1), true);
  s.shift = Tensor<T>({channels, 1, 1, 1}, T(0), true);
  s.running_mean = Tensor<T>({channels, 1, 1, 1}, T(0));
  s.running_var = Tensor<T>({channels, 1, 1, 1}, T(1));
  return s;
}

/// Per-channel normalization. Training mode uses batch statistics and
/// updates the running estimates; eval mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x,
                     BatchNormState<T>& state, bool training) {
  const Shape s = x.shape();
  if (state.channels() != s.c) {
    throw ChannelError("batch_norm: state has " +
                       std::to_string(state.channels()) +
                       " channels, input has " + std::to_string(s.c));
  }
  const std::size_t count = s.n * s.plane();
  std::vector<T> mean(s.c), inv_std(s.c);
  if (training) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T sum = 0;
      for (std::size_t b = 0; b < s.n; ++b) {
        const T* p = x.data().data() + (b * s.c + c) * s.plane();
        for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      }
      const T mu = sum / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < s.n; ++b) {
        const T* p = x.data().data() + (b * s.c + c) * s.plane();
        for (std::size_t i = 0; i < s.plane(); ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const T var = sq / static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + state.eps);
      const T unbiased =
          count > 1 ? sq / static_cast<T>(count - 1) : var;
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      rm[c] = (T(1) - state.momentum) * rm[c] + state.momentum * mu;
      rv[c] = (T(1) - state.momentum) * rv[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < s.c; ++c) {
      mean[c] = state.running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var.data()[c] + state.eps);
    }
  }

  Tensor<T> out(s);
  auto od = out.mutable_data();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (b * s.c + c) * s.plane();
      const T g = state.scale.data()[c];
      const T beta = state.shift.data()[c];
      for (std::size_t i = 0; i < s.plane(); ++i) {
        od[base + i] = g * (x.data()[base + i] - mean[c]) * inv_std[c] + beta;
      }
    }
  }

  if (tape.wants({&x, &state.scale, &state.shift})) {
    Tensor<T> scale = state.scale;
    Tensor<T> shift = state.shift;
    tape.record(
        "batch_norm", {x, scale, shift}, out,
        [x, scale, shift, out, mean, inv_std, training, count]() mutable {
          const Shape s = x.shape();
          auto g = out.grad();
          for (std::size_t c = 0; c < s.c; ++c) {
            T sum_g = 0, sum_gx = 0;
            for (std::size_t b = 0; b < s.n; ++b) {
              const std::size_t base = (b * s.c + c) * s.plane();
              for (std::size_t i = 0; i < s.plane(); ++i) {
                const T xhat = (x.data()[base + i] - mean[c]) * inv_std[c];
                sum_g += g[base + i];
                sum_gx += g[base + i] * xhat;
              }
            }
            if (scale.requires_grad()) scale.ensure_grad()[c] += sum_gx;
            if (shift.requires_grad()) shift.ensure_grad()[c] += sum_g;
            if (!x.requires_grad()) continue;
            auto dx = x.ensure_grad();
            const T gamma = scale.data()[c];
            const T n = static_cast<T>(count);
            for (std::size_t b = 0; b < s.n; ++b) {
              const std::size_t base = (b * s.c + c) * s.plane();
              for (std::size_t i = 0; i < s.plane(); ++i) {
                if (training) {
                  const T xhat = (x.data()[base + i] - mean[c]) * inv_std[c];
                  dx[base + i] += gamma * inv_std[c] / n *
                                  (n * g[base + i] - sum_g - xhat * sum_gx);
                } else {
                  dx[base + i] += gamma * inv_std[c] * g[base + i];
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto od = out.mutable_data();
  auto xd = x.data();
  // NaN passes through so a poisoned batch still surfaces in the loss.
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] < T(0) ? T(0) : xd[i];
  if (tape.wants({&x})) {
    tape.record("relu", {x}, out, [x, out]() mutable {
      auto dx = x.ensure_grad();
      auto g = out.grad();
      auto xd = x.data();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (xd[i] > T(0)) dx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] + b.data()[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = a.data()[i] * b.data()[i];
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto d = b.ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

/// Scalar (1,1,1,1) sum of all elements.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out({1, 1, 1, 1}, acc);
  if (tape.wants({&x})) {
    tape.record("sum", {x}, out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& d : x.ensure_grad()) d += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  Shape s = xs.front().shape();
  std::size_t channels = 0;
  for (const auto& t : xs) {
    const Shape& ts = t.shape();
    if (ts.n != s.n || ts.h != s.h || ts.w != s.w) {
      throw GeometryError("concat_channels: " + ts.str() +
                          " incompatible with " + s.str());
    }
    channels += ts.c;
  }
  Shape os{s.n, channels, s.h, s.w};
  Tensor<T> out(os);
  auto od = out.mutable_data();
  for (std::size_t b = 0; b < s.n; ++b) {
    std::size_t offset = 0;
    for (const auto& t : xs) {
      const std::size_t len = t.shape().c * s.plane();
      const T* src = t.data().data() + b * len;
      std::copy(src, src + len, od.data() + (b * channels) * s.plane() + offset);
      offset += len;
    }
  }
  if (tape.wants(xs)) {
    tape.record("concat_channels", xs, out, [xs, out, channels]() mutable {
      const Shape s = out.shape();
      auto g = out.grad();
      for (std::size_t b = 0; b < s.n; ++b) {
        std::size_t offset = 0;
        for (auto& t : xs) {
          const std::size_t len = t.shape().c * s.plane();
          if (t.requires_grad()) {
            T* dst = t.ensure_grad().data() + b * len;
            const T* src = g.data() + b * channels * s.plane() + offset;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
          offset += len;
        }
      }
    });
  }
  return out;
}

/// Channels [begin, begin + count) of x.
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                         std::size_t count) {
  const Shape s = x.shape();
  if (begin + count > s.c || count == 0) {
    throw GeometryError("slice_channels: range [" + std::to_string(begin) +
                        "," + std::to_string(begin + count) +
                        ") outside " + std::to_string(s.c) + " channels");
  }
  Tensor<T> out({s.n, count, s.h, s.w});
  auto od = out.mutable_data();
  const std::size_t len = count * s.plane();
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* src = x.data().data() + (b * s.c + begin) * s.plane();
    std::copy(src, src + len, od.data() + b * len);
  }
  if (tape.wants({&x})) {
    tape.record("slice_channels", {x}, out, [x, out, begin, len]() mutable {
      const Shape s = x.shape();
      auto dx = x.ensure_grad();
      auto g = out.grad();
      for (std::size_t b = 0; b < s.n; ++b) {
        T* dst = dx.data() + (b * s.c + begin) * s.plane();
        for (std::size_t i = 0; i < len; ++i) dst[i] += g[b * len + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear up-sampling, half-pixel convention (align_corners = false):
// output pixel o reads source coordinate (o + 0.5) / factor - 0.5, clamped
// into [0, extent - 1].

namespace detail {

struct LerpTap {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

inline std::vector<LerpTap> upsample_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_upsample(Tape<T>& tape, const Tensor<T>& x,
                            std::size_t factor) {
  if (factor != 1 && factor != 2 && factor != 4 && factor != 8) {
    throw GeometryError("bilinear_upsample: unsupported factor " +
                        std::to_string(factor));
  }
  const Shape s = x.shape();
  Tensor<T> out({s.n, s.c, s.h * factor, s.w * factor});
  if (factor == 1) {
    std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  } else {
    const auto ty = detail::upsample_taps(s.h, factor);
    const auto tx = detail::upsample_taps(s.w, factor);
    const std::size_t ow = s.w * factor;
    auto od = out.mutable_data();
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
      const T* src = x.data().data() + p * s.plane();
      T* dst = od.data() + p * ty.size() * tx.size();
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const T ly = static_cast<T>(ty[oy].frac);
        const T* r0 = src + ty[oy].i0 * s.w;
        const T* r1 = src + ty[oy].i1 * s.w;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T lx = static_cast<T>(tx[ox].frac);
          const T top = (T(1) - lx) * r0[tx[ox].i0] + lx * r0[tx[ox].i1];
          const T bot = (T(1) - lx) * r1[tx[ox].i0] + lx * r1[tx[ox].i1];
          dst[oy * ow + ox] = (T(1) - ly) * top + ly * bot;
        }
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("bilinear_upsample", {x}, out, [x, out, factor]() mutable {
      const Shape s = x.shape();
      auto dx = x.ensure_grad();
      auto g = out.grad();
      if (factor == 1) {
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
        return;
      }
      const auto ty = detail::upsample_taps(s.h, factor);
      const auto tx = detail::upsample_taps(s.w, factor);
      const std::size_t ow = s.w * factor;
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        T* dst = dx.data() + p * s.plane();
        const T* src = g.data() + p * ty.size() * tx.size();
        for (std::size_t oy = 0; oy < ty.size(); ++oy) {
          const T ly = static_cast<T>(ty[oy].frac);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T lx = static_cast<T>(tx[ox].frac);
            const T gv = src[oy * ow + ox];
            dst[ty[oy].i0 * s.w + tx[ox].i0] += (T(1) - ly) * (T(1) - lx) * gv;
            dst[ty[oy].i0 * s.w + tx[ox].i1] += (T(1) - ly) * lx * gv;
            dst[ty[oy].i1 * s.w + tx[ox].i0] += ly * (T(1) - lx) * gv;
            dst[ty[oy].i1 * s.w + tx[ox].i1] += ly * lx * gv;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over non-ignored pixels of -log softmax(logits)[label]. When every
/// pixel is ignored the loss is 0 and so is its gradient.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                const LabelMap& labels) {
  const Shape s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    throw GeometryError("softmax_cross_entropy: labels (" +
                        std::to_string(labels.n) + "," +
                        std::to_string(labels.h) + "," +
                        std::to_string(labels.w) + ") vs logits " + s.str());
  }
  std::vector<T> probs(s.numel(), T(0));
  std::size_t valid = 0;
  T total = 0;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const std::uint8_t lbl = labels.values[b * s.plane() + i];
      if (lbl == kIgnoreLabel) continue;
      if (lbl >= s.c) {
        throw DataError("softmax_cross_entropy: label " + std::to_string(lbl) +
                        " outside [0," + std::to_string(s.c) + ")");
      }
      const T* l = logits.data().data() + b * s.c * s.plane() + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, l[c * s.plane()]);
      T z = 0;
      for (std::size_t c = 0; c < s.c; ++c) z += std::exp(l[c * s.plane()] - mx);
      const T log_z = std::log(z) + mx;
      for (std::size_t c = 0; c < s.c; ++c) {
        probs[(b * s.c + c) * s.plane() + i] = std::exp(l[c * s.plane()] - log_z);
      }
      total += log_z - l[lbl * s.plane()];
      ++valid;
    }
  }
  Tensor<T> out({1, 1, 1, 1}, valid ? total / static_cast<T>(valid) : T(0));
  if (tape.wants({&logits})) {
    tape.record("softmax_cross_entropy", {logits}, out,
                [logits, labels, out, probs, valid]() mutable {
                  if (valid == 0) {
                    logits.ensure_grad();
                    return;
                  }
                  const Shape s = logits.shape();
                  const T scale = out.grad()[0] / static_cast<T>(valid);
                  auto d = logits.ensure_grad();
                  for (std::size_t b = 0; b < s.n; ++b) {
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                      const std::uint8_t lbl = labels.values[b * s.plane() + i];
                      if (lbl == kIgnoreLabel) continue;
                      for (std::size_t c = 0; c < s.c; ++c) {
                        const std::size_t idx = (b * s.c + c) * s.plane() + i;
                        const T target = c == lbl ? T(1) : T(0);
                        d[idx] += scale * (probs[idx] - target);
                      }
                    }
                  }
                });
  }
  return out;
}

/// Per-pixel arg-max over channels; ties resolve to the lowest class index.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      std::size_t best = 0;
      T best_v = logits.data()[b * s.c * s.plane() + i];
      for (std::size_t c = 1; c < s.c; ++c) {
        const T v = logits.data()[(b * s.c + c) * s.plane() + i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.values[b * s.plane() + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace ifwm

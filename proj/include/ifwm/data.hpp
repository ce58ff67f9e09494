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
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ifwm/error.hpp"
#include "ifwm/labels.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

inline constexpr std::size_t kImageChannels = 3;

/// One scene or tile: a (3, H, W) image in [0,1] and an (H, W) label raster.
struct SceneSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> image;  // channel-major, row-major within a channel
  LabelMap labels;            // n == 1

  double pixel(std::size_t c, std::size_t y, std::size_t x) const {
    return image[(c * height + y) * width + x];
  }
  std::uint8_t label(std::size_t y, std::size_t x) const { return labels.values[y * width + x]; }

  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

/// Class indices used by the generator. Classes past kVegetation are small
/// "vehicle" rectangles and only appear when num_classes asks for them.
enum SceneClass : std::uint8_t {
  kBackground = 0,
  kBuilding = 1,
  kRoad = 2,
  kVegetation = 3,
};

struct SceneSpec {
  std::size_t height = 160;
  std::size_t width = 160;
  std::size_t num_classes = 4;
  std::size_t buildings = 7;
  double rotated_fraction = 0.4;
  std::size_t roads = 2;
  std::size_t blobs = 5;
  std::size_t vehicles = 6;  // only drawn when num_classes > 4
  double min_size = 4.0;     // smallest building side in pixels
  double max_size = 40.0;    // largest building side in pixels
  std::array<double, 8> noise{0.06, 0.05, 0.04, 0.08, 0.05, 0.05, 0.05, 0.05};
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 32 || width < 32) throw ConfigError("scene extents must be at least 32");
    if (num_classes < 2 || num_classes > noise.size()) {
      throw ConfigError("num_classes must lie in [2, " + std::to_string(noise.size()) + "]");
    }
    if (!(min_size > 0.0) || max_size < min_size) {
      throw ConfigError("object sizes need 0 < min_size <= max_size");
    }
  }

  std::size_t object_count() const {
    return buildings + roads + blobs + (num_classes > 4 ? vehicles : 0);
  }
};

namespace detail {

/// Maps a drawn object's semantic kind onto the configured class count.
/// With two classes every object is foreground.
inline std::uint8_t class_for_kind(std::uint8_t kind, std::size_t num_classes) {
  if (kind == kBackground) return kBackground;
  return static_cast<std::uint8_t>(1 + (kind - 1) % (num_classes - 1));
}

inline constexpr std::array<std::array<double, 3>, 8> kBaseColor{{
    {0.46, 0.50, 0.38},  // background: bare soil and low grass
    {0.72, 0.52, 0.46},  // building roofs
    {0.42, 0.42, 0.45},  // roads
    {0.22, 0.48, 0.22},  // vegetation
    {0.20, 0.30, 0.70},  // vehicles
    {0.85, 0.80, 0.25},
    {0.60, 0.25, 0.60},
    {0.15, 0.65, 0.65},
}};

struct Canvas {
  std::size_t h, w;
  std::vector<std::uint8_t> label;
  std::vector<double> tint;  // per-pixel object colour jitter, 3 per pixel

  void paint(std::size_t y, std::size_t x, std::uint8_t cls, const std::array<double, 3>& jitter) {
    label[y * w + x] = cls;
    for (std::size_t c = 0; c < 3; ++c) tint[(y * w + x) * 3 + c] = jitter[c];
  }
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Log-uniform draw so small and large objects are equally frequent per octave.
inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

inline std::array<double, 3> jitter(std::mt19937_64& rng, double amount) {
  return {uniform(rng, -amount, amount), uniform(rng, -amount, amount),
          uniform(rng, -amount, amount)};
}

inline void draw_rect(Canvas& cv, double cy, double cx, double hh, double hw, double angle,
                      std::uint8_t cls, const std::array<double, 3>& tint) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double reach = std::hypot(hh, hw) + 1.0;
  const auto y0 = static_cast<long>(std::max(0.0, std::floor(cy - reach)));
  const auto y1 = static_cast<long>(std::min<double>(cv.h - 1, std::ceil(cy + reach)));
  const auto x0 = static_cast<long>(std::max(0.0, std::floor(cx - reach)));
  const auto x1 = static_cast<long>(std::min<double>(cv.w - 1, std::ceil(cx + reach)));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double u = ca * dx + sa * dy;
      const double v = -sa * dx + ca * dy;
      if (std::abs(u) <= hw && std::abs(v) <= hh) {
        cv.paint(static_cast<std::size_t>(y), static_cast<std::size_t>(x), cls, tint);
      }
    }
  }
}

inline double segment_distance(double py, double px, double ay, double ax, double by,
                               double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0.0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(py - (ay + t * vy), px - (ax + t * vx));
}

inline void draw_polyline(Canvas& cv, const std::vector<std::array<double, 2>>& pts,
                          double half_width, std::uint8_t cls,
                          const std::array<double, 3>& tint) {
  for (std::size_t y = 0; y < cv.h; ++y) {
    for (std::size_t x = 0; x < cv.w; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      for (std::size_t s = 0; s + 1 < pts.size(); ++s) {
        if (segment_distance(py, px, pts[s][0], pts[s][1], pts[s + 1][0], pts[s + 1][1]) <=
            half_width) {
          cv.paint(y, x, cls, tint);
          break;
        }
      }
    }
  }
}

/// Star-shaped blob: radius r0 * (1 + a*sin(k*theta + phase)).
inline void draw_blob(Canvas& cv, double cy, double cx, double r0, double amp, int lobes,
                      double phase, std::uint8_t cls, const std::array<double, 3>& tint) {
  const double reach = r0 * (1.0 + amp) + 1.0;
  const auto y0 = static_cast<long>(std::max(0.0, std::floor(cy - reach)));
  const auto y1 = static_cast<long>(std::min<double>(cv.h - 1, std::ceil(cy + reach)));
  const auto x0 = static_cast<long>(std::max(0.0, std::floor(cx - reach)));
  const auto x1 = static_cast<long>(std::min<double>(cv.w - 1, std::ceil(cx + reach)));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double r = std::hypot(dy, dx);
      const double theta = std::atan2(dy, dx);
      if (r <= r0 * (1.0 + amp * std::sin(lobes * theta + phase))) {
        cv.paint(static_cast<std::size_t>(y), static_cast<std::size_t>(x), cls, tint);
      }
    }
  }
}

}  // namespace detail

/// Renders one synthetic aerial scene. Roads go down first, then
/// vegetation, then buildings, then vehicles, so later objects own the
/// label where they overlap.
inline SceneSample generate_scene(const SceneSpec& spec) {
  spec.validate();
  using namespace detail;
  std::mt19937_64 rng(spec.seed);
  const std::size_t h = spec.height, w = spec.width;
  Canvas cv{h, w, std::vector<std::uint8_t>(h * w, kBackground),
            std::vector<double>(h * w * 3, 0.0)};
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  const std::size_t C = spec.num_classes;

  for (std::size_t r = 0; r < spec.roads; ++r) {
    // A road enters on one edge and wanders across the scene.
    std::vector<std::array<double, 2>> pts;
    const bool vertical = uniform(rng, 0, 1) < 0.5;
    const int segments = 3;
    for (int s = 0; s <= segments; ++s) {
      const double t = static_cast<double>(s) / segments;
      const double along = -4.0 + t * ((vertical ? H : W) + 8.0);
      const double across = uniform(rng, 0.15, 0.85) * (vertical ? W : H);
      pts.push_back(vertical ? std::array<double, 2>{along, across}
                             : std::array<double, 2>{across, along});
    }
    const double half = uniform(rng, 2.5, 5.0);
    draw_polyline(cv, pts, half, class_for_kind(kRoad, C), jitter(rng, 0.03));
  }
  for (std::size_t b = 0; b < spec.blobs; ++b) {
    const double r0 = log_uniform(rng, spec.min_size * 0.75, spec.max_size * 0.6);
    draw_blob(cv, uniform(rng, 0, H), uniform(rng, 0, W), r0, uniform(rng, 0.1, 0.35),
              static_cast<int>(uniform(rng, 3, 7)), uniform(rng, 0, 2 * std::numbers::pi),
              class_for_kind(kVegetation, C), jitter(rng, 0.05));
  }
  for (std::size_t b = 0; b < spec.buildings; ++b) {
    const double side = log_uniform(rng, spec.min_size, spec.max_size);
    const double aspect = uniform(rng, 0.5, 1.0);
    const double angle = uniform(rng, 0, 1) < spec.rotated_fraction
                             ? uniform(rng, -std::numbers::pi / 4, std::numbers::pi / 4)
                             : 0.0;
    draw_rect(cv, uniform(rng, 0, H), uniform(rng, 0, W), side * aspect / 2, side / 2, angle,
              class_for_kind(kBuilding, C), jitter(rng, 0.06));
  }
  if (C > 4) {
    for (std::size_t v = 0; v < spec.vehicles; ++v) {
      const auto cls = static_cast<std::uint8_t>(4 + v % (C - 4));
      draw_rect(cv, uniform(rng, 0, H), uniform(rng, 0, W), 1.5, 3.0,
                uniform(rng, 0, std::numbers::pi), cls, jitter(rng, 0.03));
    }
  }

  SceneSample out;
  out.height = h;
  out.width = w;
  out.labels = LabelMap(1, h, w);
  out.labels.values = cv.label;
  out.image.resize(kImageChannels * h * w);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint8_t cls = cv.label[y * w + x];
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        const double v = kBaseColor[cls][c] + cv.tint[(y * w + x) * 3 + c] +
                         spec.noise[cls] * gauss(rng);
        out.image[(c * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

/// Window origins along one axis: 0, stride, 2*stride, ... with the last
/// window clamped to end at the border.
inline std::vector<std::size_t> window_origins(std::size_t extent, std::size_t size,
                                               std::size_t stride) {
  if (stride == 0) throw ContractError("tile stride must be positive");
  if (size == 0 || size > extent) {
    throw GeometryError("tile size " + std::to_string(size) + " exceeds extent " +
                        std::to_string(extent));
  }
  std::vector<std::size_t> out;
  for (std::size_t o = 0;; o += stride) {
    if (o + size >= extent) {
      out.push_back(extent - size);
      break;
    }
    out.push_back(o);
  }
  return out;
}

inline SceneSample crop(const SceneSample& s, std::size_t oy, std::size_t ox, std::size_t h,
                        std::size_t w) {
  if (oy + h > s.height || ox + w > s.width) throw GeometryError("crop outside scene");
  SceneSample t;
  t.height = h;
  t.width = w;
  t.image.resize(kImageChannels * h * w);
  t.labels = LabelMap(1, h, w);
  for (std::size_t c = 0; c < kImageChannels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        t.image[(c * h + y) * w + x] = s.pixel(c, oy + y, ox + x);
      }
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) t.labels.values[y * w + x] = s.label(oy + y, ox + x);
  }
  return t;
}

struct Tile {
  std::size_t oy = 0;
  std::size_t ox = 0;
  SceneSample sample;
};

/// Row-major square windows of side `size`.
inline std::vector<Tile> tile_with_origins(const SceneSample& s, std::size_t size,
                                           std::size_t stride) {
  const auto ys = window_origins(s.height, size, stride);
  const auto xs = window_origins(s.width, size, stride);
  std::vector<Tile> out;
  out.reserve(ys.size() * xs.size());
  for (std::size_t oy : ys) {
    for (std::size_t ox : xs) out.push_back({oy, ox, crop(s, oy, ox, size, size)});
  }
  return out;
}

inline std::vector<SceneSample> tile(const SceneSample& s, std::size_t size, std::size_t stride) {
  std::vector<SceneSample> out;
  for (auto& t : tile_with_origins(s, size, stride)) out.push_back(std::move(t.sample));
  return out;
}

/// Counter-clockwise quarter turns; labels move with their pixels.
inline SceneSample rotate_augment(const SceneSample& s, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return s;
  if (s.height != s.width) {
    throw GeometryError("rotate_augment needs a square sample, got " + std::to_string(s.height) +
                        "x" + std::to_string(s.width));
  }
  const std::size_t n = s.height;
  auto src = [&](std::size_t y, std::size_t x) -> std::array<std::size_t, 2> {
    switch (k) {
      case 1:
        return {x, n - 1 - y};
      case 2:
        return {n - 1 - y, n - 1 - x};
      default:
        return {n - 1 - x, y};
    }
  };
  SceneSample r = s;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const auto [sy, sx] = src(y, x);
      r.labels.values[y * n + x] = s.label(sy, sx);
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        r.image[(c * n + y) * n + x] = s.pixel(c, sy, sx);
      }
    }
  }
  return r;
}

inline std::vector<std::uint64_t> label_histogram(const LabelMap& m, std::size_t classes) {
  std::vector<std::uint64_t> h(classes + 1, 0);  // last bucket: ignore / out of range
  for (auto v : m.values) ++h[v < classes ? v : classes];
  return h;
}

/// Report names for the synthetic classes. With two classes every object
/// kind is foreground; classes past vegetation hold vehicles.
inline std::vector<std::string> scene_class_names(std::size_t classes) {
  if (classes == 2) return {"background", "foreground"};
  static const char* kNames[] = {"background", "building", "road", "vegetation"};
  std::vector<std::string> out;
  for (std::size_t c = 0; c < classes; ++c) {
    out.push_back(c < 4 ? kNames[c] : "vehicle" + std::to_string(c - 4));
  }
  return out;
}

/// Stacks equally sized samples into an (N, 3, H, W) tensor and labels.
template <typename T>
std::pair<Tensor<T>, LabelMap> make_batch(const std::vector<const SceneSample*>& samples) {
  if (samples.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t h = samples[0]->height, w = samples[0]->width;
  Tensor<T> x(Shape{samples.size(), kImageChannels, h, w});
  LabelMap y(samples.size(), h, w);
  auto d = x.mutable_data();
  const std::size_t per = kImageChannels * h * w;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const SceneSample& s = *samples[b];
    if (s.height != h || s.width != w) throw GeometryError("make_batch: mixed sample extents");
    for (std::size_t i = 0; i < per; ++i) d[b * per + i] = static_cast<T>(s.image[i]);
    std::copy(s.labels.values.begin(), s.labels.values.end(),
              y.values.begin() + static_cast<std::ptrdiff_t>(b * h * w));
  }
  return {std::move(x), std::move(y)};
}

}  // namespace ifwm

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

// RAST v1 raster files: one ASCII header line
//
//   RAST v1 <c> <h> <w> <dtype>\n
//
// followed by c*h*w row-major little-endian values. dtype is one of u8,
// f32, f64. Label rasters use u8 with c == 1.
//
// A dataset manifest holds one sample per line: "image_path\tlabel_path".
// Relative paths resolve against the manifest's directory.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ifwm/data.hpp"
#include "ifwm/error.hpp"
#include "ifwm/labels.hpp"

namespace ifwm {

static_assert(std::endian::native == std::endian::little,
              "raster I/O assumes a little-endian host");

enum class RasterType { kU8, kF32, kF64 };

inline const char* raster_type_name(RasterType t) {
  switch (t) {
    case RasterType::kU8:
      return "u8";
    case RasterType::kF32:
      return "f32";
    case RasterType::kF64:
      return "f64";
  }
  return "?";
}

struct Raster {
  std::size_t c = 0, h = 0, w = 0;
  RasterType type = RasterType::kF64;
  std::vector<double> values;  // widened on read; u8 stays exact
};

inline void write_raster(const std::string& path, std::size_t c, std::size_t h, std::size_t w,
                         RasterType type, const std::vector<double>& values) {
  if (values.size() != c * h * w) throw ContractError("write_raster: value count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open raster for writing: " + path);
  os << "RAST v1 " << c << ' ' << h << ' ' << w << ' ' << raster_type_name(type) << '\n';
  for (double v : values) {
    switch (type) {
      case RasterType::kU8: {
        const auto b = static_cast<std::uint8_t>(v);
        os.put(static_cast<char>(b));
        break;
      }
      case RasterType::kF32: {
        const auto f = static_cast<float>(v);
        os.write(reinterpret_cast<const char*>(&f), sizeof f);
        break;
      }
      case RasterType::kF64:
        os.write(reinterpret_cast<const char*>(&v), sizeof v);
        break;
    }
  }
  if (!os) throw IoError("failed writing raster: " + path);
}

inline Raster read_raster(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open raster: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty raster file: " + path);
  std::istringstream hs(line);
  std::string magic, version, dtype, extra;
  Raster r;
  if (!(hs >> magic >> version >> r.c >> r.h >> r.w >> dtype) || magic != "RAST" ||
      version != "v1" || (hs >> extra)) {
    throw IoError("bad RAST header in " + path + ": '" + line + "'");
  }
  if (dtype == "u8") {
    r.type = RasterType::kU8;
  } else if (dtype == "f32") {
    r.type = RasterType::kF32;
  } else if (dtype == "f64") {
    r.type = RasterType::kF64;
  } else {
    throw IoError("unknown RAST dtype '" + dtype + "' in " + path);
  }
  const std::size_t n = r.c * r.h * r.w;
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = false;
    switch (r.type) {
      case RasterType::kU8: {
        char b;
        ok = static_cast<bool>(is.get(b));
        r.values[i] = static_cast<std::uint8_t>(b);
        break;
      }
      case RasterType::kF32: {
        float f;
        ok = static_cast<bool>(is.read(reinterpret_cast<char*>(&f), sizeof f));
        r.values[i] = f;
        break;
      }
      case RasterType::kF64: {
        double d;
        ok = static_cast<bool>(is.read(reinterpret_cast<char*>(&d), sizeof d));
        r.values[i] = d;
        break;
      }
    }
    if (!ok) throw IoError("truncated RAST payload in " + path);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes after RAST payload in " + path);
  }
  return r;
}

inline void write_image(const std::string& path, const SceneSample& s) {
  write_raster(path, kImageChannels, s.height, s.width, RasterType::kF64, s.image);
}

inline void write_labels(const std::string& path, const LabelMap& m) {
  if (m.n != 1) throw ContractError("write_labels: single raster expected");
  write_raster(path, 1, m.h, m.w, RasterType::kU8,
               std::vector<double>(m.values.begin(), m.values.end()));
}

inline SceneSample read_sample(const std::string& image_path, const std::string& label_path) {
  const Raster img = read_raster(image_path);
  const Raster lab = read_raster(label_path);
  if (img.c != kImageChannels) {
    throw DataError(image_path + ": expected " + std::to_string(kImageChannels) +
                    " channels, found " + std::to_string(img.c));
  }
  if (lab.c != 1 || lab.type != RasterType::kU8) {
    throw DataError(label_path + ": labels must be single-channel u8");
  }
  if (lab.h != img.h || lab.w != img.w) {
    throw DataError(label_path + ": label extents differ from " + image_path);
  }
  SceneSample s;
  s.height = img.h;
  s.width = img.w;
  s.image = img.values;
  s.labels = LabelMap(1, lab.h, lab.w);
  for (std::size_t i = 0; i < lab.values.size(); ++i) {
    s.labels.values[i] = static_cast<std::uint8_t>(lab.values[i]);
  }
  return s;
}

struct ManifestEntry {
  std::string image;
  std::string labels;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open manifest for writing: " + path);
  for (const auto& e : entries) os << e.image << '\t' << e.labels << '\n';
  if (!os) throw IoError("failed writing manifest: " + path);
}

/// Reads a manifest and resolves relative paths against its directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path);
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected 'image_path<TAB>label_path'");
    }
    out.push_back({resolve(line.substr(0, tab)), resolve(line.substr(tab + 1))});
  }
  return out;
}

/// Loads every manifest sample and checks labels against `num_classes`.
inline std::vector<SceneSample> load_dataset(const std::vector<ManifestEntry>& entries,
                                             std::size_t num_classes) {
  std::vector<SceneSample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    out.push_back(read_sample(e.image, e.labels));
    for (auto v : out.back().labels.values) {
      if (v != kIgnoreLabel && v >= num_classes) {
        throw DataError(e.labels + ": label " + std::to_string(v) + " outside [0," +
                        std::to_string(num_classes) + ")");
      }
    }
  }
  return out;
}

/// Binary PGM (P5) with grey level class * 255 / (classes - 1). Ignored
/// pixels render as 255.
inline void write_label_pgm(const std::string& path, const LabelMap& m, std::size_t classes,
                            std::size_t batch_index = 0) {
  if (classes < 2) throw ContractError("write_label_pgm: need at least two classes");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open PGM for writing: " + path);
  os << "P5\n" << m.w << ' ' << m.h << "\n255\n";
  const std::size_t off = batch_index * m.h * m.w;
  for (std::size_t i = 0; i < m.h * m.w; ++i) {
    const std::uint8_t v = m.values[off + i];
    const std::size_t g = v < classes ? v * 255 / (classes - 1) : 255;
    os.put(static_cast<char>(g));
  }
  if (!os) throw IoError("failed writing PGM: " + path);
}

}  // namespace ifwm

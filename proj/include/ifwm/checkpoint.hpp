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

// Checkpoint layout (all integers little-endian):
//
//   magic    4 bytes  "IFWM"
//   version  u32      1
//   repeated until end of file:
//     name_len  u32
//     name      name_len bytes, UTF-8, no terminator
//     extents   4 x u32 (n, c, h, w)
//     payload   n*c*h*w x f64, IEEE-754 binary64
//
// Records appear in registry order: learnable parameters first, then
// batch-norm running statistics.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ifwm/backbone.hpp"
#include "ifwm/error.hpp"
#include "ifwm/tensor.hpp"

namespace ifwm {

inline constexpr std::array<char, 4> kCheckpointMagic{'I', 'F', 'W', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A named tensor as stored on disk.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Raised when a checkpoint does not line up with a network. The message
/// lists every missing, unexpected and reshaped tensor.
class CheckpointMismatch : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
      std::uint32_t(b[3]) << 24;
  return true;
}

inline bool get_f64(std::istream& is, double& d) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  std::memcpy(&d, &bits, sizeof d);
  return true;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const std::vector<NamedArray>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic.data(), 4);
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& r : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    for (std::size_t e : {r.shape.n, r.shape.c, r.shape.h, r.shape.w}) {
      detail::put_u32(os, static_cast<std::uint32_t>(e));
    }
    for (double v : r.values) detail::put_f64(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline std::vector<NamedArray> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  std::array<char, 4> magic{};
  std::uint32_t version = 0;
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) {
    throw IoError("not an IFWM checkpoint (bad magic): " + path);
  }
  if (!detail::get_u32(is, version) || version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  }
  std::vector<NamedArray> out;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    NamedArray r;
    r.name.resize(name_len);
    std::uint32_t e[4];
    if (!is.read(r.name.data(), name_len) || !detail::get_u32(is, e[0]) ||
        !detail::get_u32(is, e[1]) || !detail::get_u32(is, e[2]) || !detail::get_u32(is, e[3])) {
      throw IoError("truncated checkpoint record header in " + path);
    }
    r.shape = {e[0], e[1], e[2], e[3]};
    r.values.resize(r.shape.numel());
    for (double& v : r.values) {
      if (!detail::get_f64(is, v)) {
        throw IoError("truncated payload for '" + r.name + "' in " + path);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Parameters followed by buffers, converted to f64.
template <typename T>
std::vector<NamedArray> snapshot(const Network<T>& net) {
  std::vector<NamedArray> out;
  for (const auto* list : {&net.registry(), &net.buffers()}) {
    for (const auto& [name, t] : *list) {
      out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    }
  }
  return out;
}

/// Copies stored values into `net`. Every network tensor must be present
/// with a matching shape and no extra records are allowed.
template <typename T>
void restore(Network<T>& net, const std::vector<NamedArray>& records) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  std::vector<std::string> missing, reshaped, unexpected;
  std::map<std::string, bool> seen;
  for (const auto* list : {&net.registry(), &net.buffers()}) {
    for (const auto& [name, t] : *list) {
      seen[name] = true;
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        missing.push_back(name);
      } else if (!(it->second->shape == t.shape())) {
        reshaped.push_back(name + " " + it->second->shape.str() + " vs " + t.shape().str());
      }
    }
  }
  for (const auto& r : records) {
    if (!seen.count(r.name)) unexpected.push_back(r.name);
  }
  if (!missing.empty() || !reshaped.empty() || !unexpected.empty()) {
    std::string msg = "checkpoint does not match network:";
    for (const auto& n : missing) msg += "\n  missing: " + n;
    for (const auto& n : unexpected) msg += "\n  unexpected: " + n;
    for (const auto& n : reshaped) msg += "\n  shape: " + n;
    throw CheckpointMismatch(msg);
  }
  for (const auto* list : {&net.registry(), &net.buffers()}) {
    for (const auto& [name, t] : *list) {
      const auto& src = by_name.at(name)->values;
      Tensor<T> dst = t;
      auto d = dst.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(src[i]);
    }
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net) {
  write_checkpoint(path, snapshot(net));
}

template <typename T>
void load_checkpoint(const std::string& path, Network<T>& net) {
  restore(net, read_checkpoint(path));
}

}  // namespace ifwm

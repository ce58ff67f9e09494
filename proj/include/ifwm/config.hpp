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

// Flat "key = value" configuration. Blank lines and text after '#' are
// ignored; unknown keys are errors. See `config_schema()` for the full key
// list with defaults.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ifwm/backbone.hpp"
#include "ifwm/data.hpp"
#include "ifwm/error.hpp"
#include "ifwm/flow_warp.hpp"

namespace ifwm {

enum class Precision { kF64, kF32 };

/// Synthetic dataset description shared by gen-data and in-memory runs.
struct DatasetConfig {
  std::size_t scenes = 60;
  std::uint64_t seed = 2026;
  SceneSpec scene;  // scene.seed is derived per scene index
};

struct TrainConfig {
  NetworkSpec network;
  DatasetConfig data;
  std::string manifest;  // empty: generate `data` in memory
  std::string out_dir = "ifwm_out";
  Precision precision = Precision::kF64;

  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  double lr0 = 0.01;
  double lr_decay = 0.9;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  bool deterministic = false;

  std::size_t tile_size = 64;
  std::size_t tile_stride = 48;
  bool augment = true;
  double holdout_fraction = 0.2;
  std::size_t eval_tile = 0;  // 0: evaluate whole scenes
  std::vector<std::size_t> exclude_classes;

  double stop_pa = 0.0;    // stop once held-out PA and mIoU reach both
  double stop_miou = 0.0;  // targets; 0 disables
  std::size_t dump_predictions = 0;

  std::size_t ablation_seeds = 10;
  std::vector<FusionVariant> ablation_variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::size_t ablation_epochs = 0;  // 0: use `epochs`

  double learning_rate(std::size_t epoch) const;
  void validate() const;
};

inline double TrainConfig::learning_rate(std::size_t epoch) const {
  return lr0 * std::pow(lr_decay, static_cast<double>(epoch));
}

inline void TrainConfig::validate() const {
  network.validate();
  data.scene.validate();
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (tile_size == 0 || tile_size % 32 != 0) {
    throw ConfigError("tile_size must be a positive multiple of 32");
  }
  if (tile_stride == 0) throw ConfigError("tile_stride must be positive");
  if (eval_tile % 32 != 0) throw ConfigError("eval_tile must be 0 or a multiple of 32");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in (0, 1)");
  }
  if (data.scene.num_classes != network.num_classes) {
    throw ConfigError("data and network disagree on num_classes");
  }
  for (std::size_t c : exclude_classes) {
    if (c >= network.num_classes) throw ConfigError("exclude_classes entry out of range");
  }
  if (ablation_seeds == 0) throw ConfigError("ablation_seeds must be positive");
  if (ablation_variants.empty()) throw ConfigError("ablation_variants must not be empty");
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename N>
std::vector<N> parse_number_list(const std::string& key, const std::string& v) {
  std::vector<N> out;
  for (const auto& item : split_list(v)) out.push_back(parse_number<N>(key, item));
  return out;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
  std::function<void(TrainConfig&, const std::string&)> apply;
};

inline const std::vector<ConfigKey>& config_schema() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = {
      // dataset
      {"scenes", "60", "number of synthetic scenes",
       [](TrainConfig& c, const std::string& v) { c.data.scenes = parse_number<std::size_t>("scenes", v); }},
      {"data_seed", "2026", "seed of the synthetic scene sequence",
       [](TrainConfig& c, const std::string& v) { c.data.seed = parse_number<std::uint64_t>("data_seed", v); }},
      {"scene_size", "160", "scene height and width in pixels",
       [](TrainConfig& c, const std::string& v) {
         c.data.scene.height = c.data.scene.width = parse_number<std::size_t>("scene_size", v);
       }},
      {"buildings", "7", "rectangles per scene",
       [](TrainConfig& c, const std::string& v) { c.data.scene.buildings = parse_number<std::size_t>("buildings", v); }},
      {"rotated_fraction", "0.4", "share of rotated rectangles",
       [](TrainConfig& c, const std::string& v) { c.data.scene.rotated_fraction = parse_number<double>("rotated_fraction", v); }},
      {"roads", "2", "polylines per scene",
       [](TrainConfig& c, const std::string& v) { c.data.scene.roads = parse_number<std::size_t>("roads", v); }},
      {"blobs", "5", "vegetation blobs per scene",
       [](TrainConfig& c, const std::string& v) { c.data.scene.blobs = parse_number<std::size_t>("blobs", v); }},
      {"vehicles", "6", "small rectangles for classes 4 and up",
       [](TrainConfig& c, const std::string& v) { c.data.scene.vehicles = parse_number<std::size_t>("vehicles", v); }},
      {"min_size", "4", "smallest rectangle side",
       [](TrainConfig& c, const std::string& v) { c.data.scene.min_size = parse_number<double>("min_size", v); }},
      {"max_size", "40", "largest rectangle side",
       [](TrainConfig& c, const std::string& v) { c.data.scene.max_size = parse_number<double>("max_size", v); }},
      {"noise", "0.06,0.05,0.04,0.08,0.05,0.05,0.05,0.05", "per-class noise sigma",
       [](TrainConfig& c, const std::string& v) {
         const auto vals = parse_number_list<double>("noise", v);
         if (vals.empty() || vals.size() > c.data.scene.noise.size()) {
           throw ConfigError("config key 'noise': expected 1 to 8 values");
         }
         for (std::size_t i = 0; i < vals.size(); ++i) c.data.scene.noise[i] = vals[i];
       }},
      // network
      {"num_classes", "4", "label classes (data and network)",
       [](TrainConfig& c, const std::string& v) {
         c.network.num_classes = c.data.scene.num_classes = parse_number<std::size_t>("num_classes", v);
       }},
      {"stem_channels", "16", "stem width",
       [](TrainConfig& c, const std::string& v) { c.network.stem_channels = parse_number<std::size_t>("stem_channels", v); }},
      {"branch_widths", "16,32,64,128", "four branch widths",
       [](TrainConfig& c, const std::string& v) { c.network.branch_widths = parse_number_list<std::size_t>("branch_widths", v); }},
      {"blocks_per_stage", "2", "residual blocks per branch and stage",
       [](TrainConfig& c, const std::string& v) { c.network.blocks_per_stage = parse_number<std::size_t>("blocks_per_stage", v); }},
      {"fusion_stages", "2", "multi-resolution stages",
       [](TrainConfig& c, const std::string& v) { c.network.fusion_stages = parse_number<std::size_t>("fusion_stages", v); }},
      {"variant", "ifwm", "fusion: baseline|sf|lsf|rifw|ifwm",
       [](TrainConfig& c, const std::string& v) { c.network.fusion = parse_variant(v); }},
      {"precision", "f64", "scalar type: f64|f32",
       [](TrainConfig& c, const std::string& v) {
         if (v == "f64") {
           c.precision = Precision::kF64;
         } else if (v == "f32") {
           c.precision = Precision::kF32;
         } else {
           throw ConfigError("config key 'precision': expected f64 or f32, got '" + v + "'");
         }
       }},
      // training
      {"manifest", "", "dataset manifest; empty generates scenes in memory",
       [](TrainConfig& c, const std::string& v) { c.manifest = v; }},
      {"out_dir", "ifwm_out", "output directory",
       [](TrainConfig& c, const std::string& v) { c.out_dir = v; }},
      {"epochs", "60", "training epochs",
       [](TrainConfig& c, const std::string& v) { c.epochs = parse_number<std::size_t>("epochs", v); }},
      {"batch_size", "8", "tiles per SGD step",
       [](TrainConfig& c, const std::string& v) { c.batch_size = parse_number<std::size_t>("batch_size", v); }},
      {"lr0", "0.01", "initial learning rate",
       [](TrainConfig& c, const std::string& v) { c.lr0 = parse_number<double>("lr0", v); }},
      {"lr_decay", "0.9", "per-epoch exponential decay rate",
       [](TrainConfig& c, const std::string& v) { c.lr_decay = parse_number<double>("lr_decay", v); }},
      {"momentum", "0.9", "SGD momentum (0 for plain SGD)",
       [](TrainConfig& c, const std::string& v) { c.momentum = parse_number<double>("momentum", v); }},
      {"seed", "1", "initialisation and shuffling seed",
       [](TrainConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
      {"deterministic", "false", "single-threaded evaluation",
       [](TrainConfig& c, const std::string& v) { c.deterministic = parse_bool("deterministic", v); }},
      {"tile_size", "64", "training tile side",
       [](TrainConfig& c, const std::string& v) { c.tile_size = parse_number<std::size_t>("tile_size", v); }},
      {"tile_stride", "48", "training tile stride",
       [](TrainConfig& c, const std::string& v) { c.tile_stride = parse_number<std::size_t>("tile_stride", v); }},
      {"augment", "true", "random quarter-turn rotation of training tiles",
       [](TrainConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }},
      {"holdout_fraction", "0.2", "trailing share of scenes held out",
       [](TrainConfig& c, const std::string& v) { c.holdout_fraction = parse_number<double>("holdout_fraction", v); }},
      {"eval_tile", "0", "evaluation tile side; 0 evaluates whole scenes",
       [](TrainConfig& c, const std::string& v) { c.eval_tile = parse_number<std::size_t>("eval_tile", v); }},
      {"exclude_classes", "", "classes left out of mF1/mIoU",
       [](TrainConfig& c, const std::string& v) { c.exclude_classes = parse_number_list<std::size_t>("exclude_classes", v); }},
      {"stop_pa", "0", "early-stop PA target (needs stop_miou too)",
       [](TrainConfig& c, const std::string& v) { c.stop_pa = parse_number<double>("stop_pa", v); }},
      {"stop_miou", "0", "early-stop mIoU target",
       [](TrainConfig& c, const std::string& v) { c.stop_miou = parse_number<double>("stop_miou", v); }},
      {"dump_predictions", "0", "held-out scenes written as PGM after training",
       [](TrainConfig& c, const std::string& v) { c.dump_predictions = parse_number<std::size_t>("dump_predictions", v); }},
      // ablation
      {"ablation_seeds", "10", "seeds per ablation method",
       [](TrainConfig& c, const std::string& v) { c.ablation_seeds = parse_number<std::size_t>("ablation_seeds", v); }},
      {"ablation_variants", "baseline,sf,lsf,rifw,ifwm", "methods trained by ablate",
       [](TrainConfig& c, const std::string& v) {
         c.ablation_variants.clear();
         for (const auto& name : split_list(v)) c.ablation_variants.push_back(parse_variant(name));
       }},
      {"ablation_epochs", "0", "epochs per ablation run; 0 uses epochs",
       [](TrainConfig& c, const std::string& v) { c.ablation_epochs = parse_number<std::size_t>("ablation_epochs", v); }},
  };
  return keys;
}

/// Library defaults: the IFWM variant of the toy network on the synthetic
/// benchmark.
inline TrainConfig default_config() {
  TrainConfig c;
  c.network.fusion = FusionVariant::kIFWM;
  return c;
}

inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_schema()) {
    if (k.name == key) {
      k.apply(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline TrainConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
  TrainConfig c = default_config();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    try {
      apply_setting(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  return parse_config(is, path);
}

/// Seed of scene `index` in the synthetic sequence.
inline std::uint64_t scene_seed(const DatasetConfig& d, std::size_t index) {
  return d.seed * 1000003ull + index;
}

inline std::vector<SceneSample> generate_dataset(const DatasetConfig& d) {
  std::vector<SceneSample> out;
  out.reserve(d.scenes);
  for (std::size_t i = 0; i < d.scenes; ++i) {
    SceneSpec s = d.scene;
    s.seed = scene_seed(d, i);
    out.push_back(generate_scene(s));
  }
  return out;
}

}  // namespace ifwm

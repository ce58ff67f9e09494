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

// Subcommand bodies behind tools/ifwm. Each writes its files under the
// configured output directory and narrates to `log`.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ifwm/checkpoint.hpp"
#include "ifwm/config.hpp"
#include "ifwm/gradcheck_suite.hpp"
#include "ifwm/raster_io.hpp"
#include "ifwm/train.hpp"

namespace ifwm {

namespace detail {

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  return dir;
}

inline std::ofstream open_text(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + p.string());
  return os;
}

/// Index of the scored foreground class in binary tasks, else -1.
inline int binary_foreground(std::size_t classes) { return classes == 2 ? 1 : -1; }

}  // namespace detail

/// Writes scene_NNNN.{img,lab}.rast and manifest.tsv under cfg.out_dir and
/// prints per-class pixel counts. Returns the manifest path.
inline std::string cmd_gen_data(const TrainConfig& cfg, std::ostream& log) {
  cfg.data.scene.validate();
  const auto dir = detail::ensure_dir(cfg.out_dir);
  const std::size_t classes = cfg.data.scene.num_classes;
  std::vector<std::uint64_t> counts(classes + 1, 0);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < cfg.data.scenes; ++i) {
    SceneSpec spec = cfg.data.scene;
    spec.seed = scene_seed(cfg.data, i);
    const SceneSample s = generate_scene(spec);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04zu", i);
    const std::string img = std::string(stem) + ".img.rast";
    const std::string lab = std::string(stem) + ".lab.rast";
    write_image((dir / img).string(), s);
    write_labels((dir / lab).string(), s.labels);
    entries.push_back({img, lab});
    const auto h = label_histogram(s.labels, classes);
    for (std::size_t c = 0; c <= classes; ++c) counts[c] += h[c];
  }
  const std::string manifest = (dir / "manifest.tsv").string();
  write_manifest(manifest, entries);
  const auto names = scene_class_names(classes);
  log << "class,pixels\n";
  for (std::size_t c = 0; c < classes; ++c) log << names[c] << ',' << counts[c] << '\n';
  log << "wrote " << entries.size() << " scenes to " << manifest << '\n';
  return manifest;
}

/// Loads and range-checks every sample listed in a manifest.
inline std::size_t validate_manifest(const std::string& manifest, std::size_t classes) {
  return load_dataset(read_manifest(manifest), classes).size();
}

namespace detail {

template <typename T>
void dump_predictions(Network<T>& net, const std::vector<SceneSample>& scenes,
                      std::size_t count, std::size_t classes, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < std::min(count, scenes.size()); ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "holdout_%04zu", i);
    write_label_pgm((dir / (std::string(name) + ".pred.pgm")).string(),
                    predict(net, scenes[i]), classes);
    write_label_pgm((dir / (std::string(name) + ".truth.pgm")).string(), scenes[i].labels,
                    classes);
  }
}

template <typename T>
TrainResult train_impl(const TrainConfig& cfg, std::ostream& log) {
  const DataSplit data = split_holdout(load_scenes(cfg), cfg.holdout_fraction);
  const auto dir = ensure_dir(cfg.out_dir);
  Network<T> net = build_network<T>(run_network_spec(cfg));
  log << "train: " << data.train.size() << " scenes, held out " << data.holdout.size()
      << ", variant " << variant_name(cfg.network.fusion) << ", " << net.parameter_count()
      << " parameters\n";

  auto csv = open_text(dir / "train_log.csv");
  csv << kEpochLogHeader << '\n';
  log << kEpochLogHeader << '\n';
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& row, bool improved) {
    const std::string line = format_epoch_row(row);
    csv << line << '\n' << std::flush;
    log << line << (improved ? "  *" : "") << '\n' << std::flush;
    if (improved) save_checkpoint((dir / "best.ckpt").string(), net);
  };
  TrainResult r = train_network(net, cfg, data, cfg.epochs, hooks);
  save_checkpoint((dir / "final.ckpt").string(), net);

  auto scores = open_text(dir / "scores.csv");
  write_scores_csv(scores, r.final_scores, scene_class_names(cfg.network.num_classes),
                   binary_foreground(cfg.network.num_classes));
  dump_predictions(net, data.holdout, cfg.dump_predictions, cfg.network.num_classes, dir);
  log << "best mIoU " << r.best_scores.mean_iou << " at epoch " << r.best_epoch
      << (r.stopped_early ? " (stopped early)" : "") << ", " << r.seconds << " s\n";
  return r;
}

}  // namespace detail

/// Trains one network. Writes train_log.csv, best.ckpt, final.ckpt and
/// scores.csv (held-out, final epoch) under cfg.out_dir.
inline TrainResult cmd_train(const TrainConfig& cfg, std::ostream& log) {
  cfg.validate();
  return cfg.precision == Precision::kF32 ? detail::train_impl<float>(cfg, log)
                                          : detail::train_impl<double>(cfg, log);
}

struct EvalRequest {
  std::string checkpoint;  // ignored in oracle mode
  std::string manifest;    // empty: the configured run's held-out split
  bool oracle = false;     // score the labels against themselves
  std::string output;      // empty: <out_dir>/eval.csv
};

namespace detail {

template <typename T>
Scores eval_impl(const TrainConfig& cfg, const EvalRequest& req,
                 const std::vector<SceneSample>& scenes) {
  const auto units = evaluation_units(scenes, cfg.eval_tile);
  if (req.oracle) {
    return class_scores(evaluate_oracle(units, cfg.network.num_classes), cfg.exclude_classes);
  }
  Network<T> net = build_network<T>(run_network_spec(cfg));
  load_checkpoint(req.checkpoint, net);
  return class_scores(evaluate(net, units, worker_threads(cfg.deterministic)),
                      cfg.exclude_classes);
}

}  // namespace detail

/// Scores a checkpoint and writes a per-class metrics CSV.
inline Scores cmd_eval(const TrainConfig& cfg, const EvalRequest& req, std::ostream& log) {
  cfg.validate();
  if (!req.oracle && req.checkpoint.empty()) throw ConfigError("eval needs a checkpoint");
  const std::vector<SceneSample> scenes =
      req.manifest.empty()
          ? split_holdout(load_scenes(cfg), cfg.holdout_fraction).holdout
          : load_dataset(read_manifest(req.manifest), cfg.network.num_classes);
  const Scores s = cfg.precision == Precision::kF32 ? detail::eval_impl<float>(cfg, req, scenes)
                                                    : detail::eval_impl<double>(cfg, req, scenes);
  std::filesystem::path out = req.output;
  if (out.empty()) out = detail::ensure_dir(cfg.out_dir) / "eval.csv";
  auto os = detail::open_text(out);
  const auto names = scene_class_names(cfg.network.num_classes);
  const int fg = detail::binary_foreground(cfg.network.num_classes);
  write_scores_csv(os, s, names, fg);
  write_scores_csv(log, s, names, fg);
  return s;
}

/// Runs the ablation protocol. Writes ablation.csv (mean per method) and
/// ablation_seeds.csv (every run).
inline std::vector<AblationRecord> cmd_ablate(const TrainConfig& cfg, std::ostream& log) {
  cfg.validate();
  const DataSplit data = split_holdout(load_scenes(cfg), cfg.holdout_fraction);
  const auto dir = detail::ensure_dir(cfg.out_dir);
  log << kAblationSeedHeader << '\n';
  auto on_run = [&](const AblationRecord& r) {
    std::ostringstream row;
    write_ablation_seed_csv(row, {r});
    const std::string text = row.str();
    log << text.substr(text.find('\n') + 1) << std::flush;
  };
  const auto rows = cfg.precision == Precision::kF32 ? run_ablation<float>(cfg, data, on_run)
                                                     : run_ablation<double>(cfg, data, on_run);
  auto per_seed = detail::open_text(dir / "ablation_seeds.csv");
  write_ablation_seed_csv(per_seed, rows);
  auto mean = detail::open_text(dir / "ablation.csv");
  const auto summary = summarize_ablation(rows, cfg.ablation_variants);
  write_ablation_csv(mean, summary);
  write_ablation_csv(log, summary);
  return rows;
}

/// Prints one line per suite entry; true when every entry passes.
inline bool cmd_gradcheck(const GradcheckSuiteOptions& opt, std::ostream& log) {
  bool ok = true;
  log << "op,max_rel_error,tolerance,seeds,probed,status\n";
  for (const auto& e : run_gradcheck_suite(opt)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.3e,%.0e,%zu,%zu,%s", e.op.c_str(), e.max_rel_error,
                  e.tolerance, e.seeds, e.probed, e.passed() ? "pass" : "FAIL");
    log << buf << '\n' << std::flush;
    ok = ok && e.passed();
  }
  return ok;
}

}  // namespace ifwm

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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "ifwm/backbone.hpp"
#include "ifwm/config.hpp"
#include "ifwm/data.hpp"
#include "ifwm/error.hpp"
#include "ifwm/metrics.hpp"
#include "ifwm/ops.hpp"
#include "ifwm/raster_io.hpp"

namespace ifwm {

/// Raised when the training loss stops being finite.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Momentum SGD: v = mu*v + g, p -= lr*v. With mu = 0 this is plain SGD.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<T>> params, double momentum)
      : params_(std::move(params)), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T eta = static_cast<T>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& p = params_[k];
      if (p.has_grad()) {
        auto d = p.mutable_data();
        auto g = p.grad();
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < d.size(); ++i) {
          v[i] = mu * v[i] + g[i];
          d[i] -= eta * v[i];
        }
      }
      p.clear_grad();
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
};

struct DataSplit {
  std::vector<SceneSample> train;
  std::vector<SceneSample> holdout;
};

/// The trailing `fraction` of scenes (at least one) is held out.
inline DataSplit split_holdout(std::vector<SceneSample> scenes, double fraction) {
  if (scenes.size() < 2) throw DataError("need at least two scenes to hold one out");
  auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scenes.size()) - 1e-9));
  held = std::clamp<std::size_t>(held, 1, scenes.size() - 1);
  DataSplit s;
  const auto cut = static_cast<std::ptrdiff_t>(scenes.size() - held);
  s.train.assign(std::make_move_iterator(scenes.begin()),
                 std::make_move_iterator(scenes.begin() + cut));
  s.holdout.assign(std::make_move_iterator(scenes.begin() + cut),
                   std::make_move_iterator(scenes.end()));
  return s;
}

/// Worker count for sharded evaluation: IFWM_THREADS if set, else 1.
inline std::size_t worker_threads(bool deterministic) {
  if (deterministic) return 1;
  if (const char* env = std::getenv("IFWM_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// Units of evaluation: whole scenes when `eval_tile` is 0, otherwise the
/// tiles at stride == size.
inline std::vector<SceneSample> evaluation_units(const std::vector<SceneSample>& scenes,
                                                 std::size_t eval_tile) {
  if (eval_tile == 0) return scenes;
  std::vector<SceneSample> out;
  for (const auto& s : scenes) {
    for (auto& t : tile(s, eval_tile, eval_tile)) out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
LabelMap predict(Network<T>& net, const SceneSample& s) {
  Tape<T> tape(false);
  const auto batch = make_batch<T>({&s});
  return argmax_channels(net.forward(tape, batch.first, false));
}

/// Confusion matrix of `net` over `units`, sharded round-robin across
/// `threads` workers and merged in worker order.
template <typename T>
ConfusionMatrix evaluate(Network<T>& net, const std::vector<SceneSample>& units,
                         std::size_t threads = 1) {
  const std::size_t classes = net.spec().num_classes;
  threads = std::max<std::size_t>(1, std::min(threads, units.size()));
  std::vector<ConfusionMatrix> partial(threads, ConfusionMatrix(classes));
  auto work = [&](std::size_t worker) {
    for (std::size_t i = worker; i < units.size(); i += threads) {
      partial[worker].accumulate(units[i].labels, predict(net, units[i]));
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  ConfusionMatrix total(classes);
  for (const auto& p : partial) total.merge(p);
  return total;
}

/// Ground truth scored against itself.
inline ConfusionMatrix evaluate_oracle(const std::vector<SceneSample>& units,
                                       std::size_t classes) {
  ConfusionMatrix cm(classes);
  for (const auto& u : units) cm.accumulate(u.labels, u.labels);
  return cm;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean training loss over the epoch's batches
  double pa = 0.0;    // held-out
  double miou = 0.0;  // held-out
};

inline constexpr const char* kEpochLogHeader = "epoch,lr,loss,PA,mIoU";

inline std::string format_epoch_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.12g,%.17g,%.17g,%.17g", e.epoch, e.lr, e.loss, e.pa,
                e.miou);
  return buf;
}

struct TrainResult {
  std::vector<EpochLog> log;
  Scores final_scores;
  Scores best_scores;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  double seconds = 0.0;
};

struct TrainHooks {
  /// Called after each epoch; `improved` is true when held-out mIoU beat
  /// every earlier epoch.
  std::function<void(const EpochLog&, bool improved)> on_epoch;
};

/// Trains `net` on tiles of `data.train`, evaluating on `data.holdout`
/// after each epoch with lr_e = lr0 * lr_decay^e.
template <typename T>
TrainResult train_network(Network<T>& net, const TrainConfig& cfg, const DataSplit& data,
                          std::size_t epochs, const TrainHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<SceneSample> tiles;
  for (const auto& s : data.train) {
    for (auto& t : tile(s, cfg.tile_size, cfg.tile_stride)) tiles.push_back(std::move(t));
  }
  if (tiles.empty()) throw DataError("no training tiles");
  const auto units = evaluation_units(data.holdout, cfg.eval_tile);
  const std::size_t threads = worker_threads(cfg.deterministic);

  SgdMomentum<T> opt(net.parameters(), cfg.momentum);
  std::mt19937_64 rng(detail::derive_rng(cfg.seed, "train.order"));
  std::vector<std::size_t> order(tiles.size());
  TrainResult result;
  double best_miou = -1.0;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = cfg.learning_rate(epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<SceneSample> rotated;
      rotated.reserve(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        const int turns = cfg.augment ? static_cast<int>(rng() % 4) : 0;
        rotated.push_back(rotate_augment(tiles[order[i]], turns));
      }
      std::vector<const SceneSample*> ptrs;
      for (const auto& r : rotated) ptrs.push_back(&r);
      const auto [x, y] = make_batch<T>(ptrs);

      Tape<T> tape;
      Tensor<T> loss = softmax_cross_entropy(tape, net.forward(tape, x, true), y);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw TrainingDiverged("training loss is " + std::to_string(value) + " at epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(batches) +
                               " (lr " + std::to_string(lr) + ")");
      }
      tape.backward(loss);
      opt.step(lr);
      loss_sum += value;
      ++batches;
    }

    const Scores scores = class_scores(evaluate(net, units, threads), cfg.exclude_classes);
    EpochLog row{epoch, lr, loss_sum / static_cast<double>(batches), scores.pixel_accuracy,
                 scores.mean_iou};
    result.log.push_back(row);
    result.final_scores = scores;
    const bool improved = scores.mean_iou > best_miou;
    if (improved) {
      best_miou = scores.mean_iou;
      result.best_scores = scores;
      result.best_epoch = epoch;
    }
    if (hooks.on_epoch) hooks.on_epoch(row, improved);
    if ((cfg.stop_pa > 0.0 || cfg.stop_miou > 0.0) && scores.pixel_accuracy >= cfg.stop_pa &&
        scores.mean_iou >= cfg.stop_miou) {
      result.stopped_early = true;
      break;
    }
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Scenes for a run: the manifest when set, otherwise the synthetic
/// benchmark described by `cfg.data`.
inline std::vector<SceneSample> load_scenes(const TrainConfig& cfg) {
  if (cfg.manifest.empty()) return generate_dataset(cfg.data);
  return load_dataset(read_manifest(cfg.manifest), cfg.network.num_classes);
}

/// Network description for a run; weights are seeded by the run seed.
inline NetworkSpec run_network_spec(const TrainConfig& cfg) {
  NetworkSpec s = cfg.network;
  s.seed = cfg.seed;
  return s;
}

/// One row of the ablation: a method trained under one seed.
struct AblationRecord {
  std::uint64_t seed = 0;
  FusionVariant variant = FusionVariant::kBaseline;
  Scores scores;
};

struct AblationSummary {
  FusionVariant variant;
  double mean_f1 = 0.0;
  double pa = 0.0;
  double miou = 0.0;
};

inline std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRecord>& rows,
                                                       const std::vector<FusionVariant>& order) {
  std::vector<AblationSummary> out;
  for (FusionVariant v : order) {
    AblationSummary s{v};
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant != v) continue;
      s.mean_f1 += r.scores.mean_f1;
      s.pa += r.scores.pixel_accuracy;
      s.miou += r.scores.mean_iou;
      ++n;
    }
    if (n > 0) {
      s.mean_f1 /= static_cast<double>(n);
      s.pa /= static_cast<double>(n);
      s.miou /= static_cast<double>(n);
    }
    out.push_back(s);
  }
  return out;
}

inline constexpr const char* kAblationHeader = "method,calc_process,kernel,mF1,PA,mIoU";
inline constexpr const char* kAblationSeedHeader = "seed,method,calc_process,kernel,mF1,PA,mIoU";

namespace detail {

inline std::string ablation_fields(FusionVariant v, double f1, double pa, double miou) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", f1, pa, miou);
  std::string out(variant_name(v));
  out.append(",").append(calc_process(v)).append(",").append(kernel_label(v)).append(",");
  return out + buf;
}

}  // namespace detail

/// Mean over seeds, one row per method.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationSummary>& rows) {
  os << kAblationHeader << '\n';
  for (const auto& r : rows) {
    os << detail::ablation_fields(r.variant, r.mean_f1, r.pa, r.miou) << '\n';
  }
}

/// Every (seed, method) run.
inline void write_ablation_seed_csv(std::ostream& os, const std::vector<AblationRecord>& rows) {
  os << kAblationSeedHeader << '\n';
  for (const auto& r : rows) {
    os << r.seed << ','
       << detail::ablation_fields(r.variant, r.scores.mean_f1, r.scores.pixel_accuracy,
                                  r.scores.mean_iou)
       << '\n';
  }
}

/// Trains every configured method for seeds seed, seed+1, ... on the same
/// split and reports held-out scores after the last epoch.
template <typename T>
std::vector<AblationRecord> run_ablation(
    const TrainConfig& cfg, const DataSplit& data,
    const std::function<void(const AblationRecord&)>& on_run = {}) {
  const std::size_t epochs = cfg.ablation_epochs > 0 ? cfg.ablation_epochs : cfg.epochs;
  std::vector<AblationRecord> rows;
  for (std::size_t k = 0; k < cfg.ablation_seeds; ++k) {
    TrainConfig run = cfg;
    run.seed = cfg.seed + k;
    run.stop_pa = run.stop_miou = 0.0;
    for (FusionVariant v : cfg.ablation_variants) {
      run.network.fusion = v;
      Network<T> net = build_network<T>(run_network_spec(run));
      const TrainResult r = train_network(net, run, data, epochs);
      rows.push_back({run.seed, v, r.final_scores});
      if (on_run) on_run(rows.back());
    }
  }
  return rows;
}

}  // namespace ifwm

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

// ifwm: data generation, training, evaluation, ablation and gradient checks.
//
//   ifwm gen-data  [--config f] [--seed n] [--out dir]
//   ifwm train     [--config f] [--seed n] [--variant v] [--out dir] [--deterministic]
//   ifwm eval      --checkpoint f [--manifest f] [--oracle] [--csv f] ...
//   ifwm ablate    [--config f] [--seed n] [--out dir] [--deterministic]
//   ifwm gradcheck [--seeds n]
//
// Settings apply in order: built-in defaults, --config, --set key=value,
// then the dedicated flags.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "ifwm/commands.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string variant;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_variant) {
  cmd->add_option("--config", f.config, "key=value configuration file");
  cmd->add_option("--set", f.sets, "override one setting, key=value (repeatable)");
  cmd->add_option("--seed", f.seed, "run seed (data seed for gen-data)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--deterministic", f.deterministic, "single-threaded, bit-reproducible run");
  if (with_variant) {
    cmd->add_option("--variant", f.variant, "fusion variant")
        ->check(CLI::IsMember({"baseline", "sf", "lsf", "rifw", "ifwm"}));
  }
}

ifwm::TrainConfig resolve(const CommonFlags& f, bool seed_is_data_seed) {
  ifwm::TrainConfig cfg = f.config.empty() ? ifwm::default_config() : ifwm::load_config(f.config);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ifwm::ConfigError("--set expects key=value, got '" + s + "'");
    ifwm::apply_setting(cfg, ifwm::detail::trim(s.substr(0, eq)),
                        ifwm::detail::trim(s.substr(eq + 1)));
  }
  if (f.seed) {
    ifwm::apply_setting(cfg, seed_is_data_seed ? "data_seed" : "seed", std::to_string(*f.seed));
  }
  if (!f.variant.empty()) ifwm::apply_setting(cfg, "variant", f.variant);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.deterministic) cfg.deterministic = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit feature warping: synthetic aerial segmentation toolkit"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, ablate_f;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset and manifest");
  add_common(gen, gen_f, false);

  auto* train = app.add_subcommand("train", "train one network");
  add_common(train, train_f, true);

  ifwm::EvalRequest req;
  auto* eval = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval, eval_f, true);
  eval->add_option("--checkpoint", req.checkpoint, "checkpoint to load");
  eval->add_option("--manifest", req.manifest, "dataset to score (default: held-out split)");
  eval->add_flag("--oracle", req.oracle, "score ground truth against itself");
  eval->add_option("--csv", req.output, "metrics CSV path (default: <out>/eval.csv)");

  auto* ablate = app.add_subcommand("ablate", "train every fusion variant over several seeds");
  add_common(ablate, ablate_f, false);

  ifwm::GradcheckSuiteOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seeds", gc.seeds, "seeds per operation")->check(CLI::PositiveNumber);
  grad->add_option("--fault", gc.fault_entry, "corrupt one entry's backward rule (test fixture)")
      ->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ifwm::cmd_gen_data(resolve(gen_f, true), std::cout);
    } else if (*train) {
      ifwm::cmd_train(resolve(train_f, false), std::cout);
    } else if (*eval) {
      ifwm::cmd_eval(resolve(eval_f, false), req, std::cout);
    } else if (*ablate) {
      ifwm::cmd_ablate(resolve(ablate_f, false), std::cout);
    } else if (*grad) {
      return ifwm::cmd_gradcheck(gc, std::cout) ? EXIT_SUCCESS : EXIT_FAILURE;
    }
  } catch (const std::exception& e) {
    std::cerr << "ifwm: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}

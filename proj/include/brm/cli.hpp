// Copyright 2026 The brm-meta Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment configuration and the `brm_meta` command-line driver.

#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brm/models.hpp"
#include "brm/tasks.hpp"
#include "brm/training.hpp"

namespace brm {

enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitNumerical = 2, kExitUsage = 3 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalSettings {
  std::vector<int> n_list = {8, 16, 32, 64};
  std::vector<int> curve_n_list = {8, 16, 32, 64, 128, 256};
  int tasks = 200;
  int queries_per_task = 32;
  int mc_samples = 128;
};

/// Everything a run depends on. A config file must spell out every field;
/// absent a file, all defaults apply.
struct ExperimentConfig {
  std::string experiment = "table1";
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs";
  TaskKind task_kind = TaskKind::piecewise_linear;
  TaskHyperprior hyperprior;
  int train_tasks = 1000;
  ModelConfig model;
  TrainConfig train;  // train.seed mirrors `seed`
  EvalSettings eval;

  nlohmann::json to_json() const;
  /// Strict: a missing field raises ConfigError naming the field and its
  /// default; unknown fields are rejected too.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Runs the command line (argv[0] is the program name) and returns the exit
/// code. Regular output goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace brm

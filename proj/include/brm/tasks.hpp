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

// Seeded synthetic 1-D regression tasks for the function-shift setting:
// inputs are always x ~ U(-2, 2) regardless of the task, only the conditional
// y | x depends on the task's hidden state.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brm/diffmath.hpp"

namespace brm {

enum class TaskKind { linear, piecewise_linear, conjugate_oracle };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

inline constexpr double kInputLow = -2.0;
inline constexpr double kInputHigh = 2.0;

struct Segment {
  double slope = 0.0;
  double intercept = 0.0;
};

/// Independent linear pieces separated by sorted breakpoints in (-2, 2).
/// Segment j covers [breakpoints[j-1], breakpoints[j]).
struct PiecewiseLinearSpec {
  std::vector<double> breakpoints;
  std::vector<Segment> segments;  // breakpoints.size() + 1 entries
  double noise_std = 0.1;

  double operator()(double x) const;
  std::size_t segment_index(double x) const;
  /// Jump of the noiseless function at breakpoint j (right limit - left limit).
  double jump(std::size_t j) const;
};

/// Hyperprior knobs; defaults follow the documented generators.
struct TaskHyperprior {
  double linear_noise_std = 0.1;
  double piecewise_noise_std = 0.1;
  int max_breakpoints = 3;
  double conjugate_noise_std = 1.0;
};

/// One task of the family. `h_star` holds the generator coefficients:
///   linear:            (a, c)                y = a x + c
///   conjugate_oracle:  (h)                   y = h
///   piecewise_linear:  (breakpoints..., slope_0, intercept_0, ...)
struct TaskInstance {
  TaskKind kind = TaskKind::linear;
  std::uint64_t seed = 0;
  double noise_std = 0.1;
  Vector h_star;
  PiecewiseLinearSpec piecewise;  // populated for piecewise_linear only

  /// Noiseless mean of y at x.
  double mean(double x) const;
};

/// Unordered (x, y) pairs from one task; rows are points.
struct ContextSet {
  std::uint64_t task_id = 0;
  Matrix x;  // n x dx
  Matrix y;  // n x dy

  Eigen::Index size() const { return x.rows(); }
  /// Rows [begin, begin + count) as a new set.
  ContextSet slice(Eigen::Index begin, Eigen::Index count) const;
};

TaskInstance sample_task(TaskKind kind, std::uint64_t seed, const TaskHyperprior& hyper = {});
ContextSet sample_context(const TaskInstance& task, Eigen::Index n, std::uint64_t seed);

/// A task plus one drawn context, as stored in task files.
struct TaskRecord {
  std::uint64_t task_id = 0;
  TaskInstance task;
  std::uint64_t context_seed = 0;
  ContextSet context;
};

/// JSON-lines: one record per line, every float printed with 17 significant
/// digits, every line terminated by '\n'.
void save_tasks(const std::filesystem::path& path, std::span<const TaskRecord> records);
std::string serialize_task(const TaskRecord& record);

/// Throws ParseError (line, byte offset) on malformed or truncated input;
/// nothing is returned in that case.
std::vector<TaskRecord> load_tasks(const std::filesystem::path& path);
std::vector<TaskRecord> parse_tasks(std::string_view text);

}  // namespace brm

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

// Self-contained property suite. Every property builds its own oracle and
// reports a measured value against a bound.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brm/aggregation.hpp"

namespace brm {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double bound = 0.0;
  std::string detail;
  double seconds = 0.0;

  nlohmann::json to_json() const;
  /// `PASS name  measured=... bound=...  (detail) [1.2s]`
  std::string line() const;
};

using AggregateFn =
    std::function<GaussianBelief<double>(std::span<const NaturalIncrement<double>>, const GaussianBelief<double>&)>;

struct VerifyOptions {
  /// Substring filter on property names; empty runs everything.
  std::string filter;
  int threads = 0;
  std::uint64_t seed = 20260;
  /// Aggregation under test; defaults to aggregate_brm. Tests swap in a
  /// deliberately broken version to check that the suite notices.
  AggregateFn aggregate;
  /// Called after each property finishes.
  std::function<void(const PropertyResult&)> on_result;
};

/// Names of every property, in run order.
std::vector<std::string> property_names();

std::vector<PropertyResult> run_verification(const VerifyOptions& options = {});

/// Runs a single property by exact name.
PropertyResult run_property(const std::string& name, const VerifyOptions& options = {});

}  // namespace brm

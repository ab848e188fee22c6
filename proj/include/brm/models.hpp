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

// Encoder / decoder networks for the four aggregators, the batched tape
// forward pass used in training, and the exact linear-Gaussian realization
// of natural increments.
//
// Layer map (H = hidden width, d = latent dim):
//   brm   enc.in [dx+dy, H] -> mean-pool per group -> enc.hidden [H, H] -> enc.out [H, 2d]
//   np    enc.in [dx+dy, H] -> mean-pool per task  -> enc.hidden [H, H] -> enc.out [H, 2d]
//   gqn   enc.in [dx+dy, H] -> enc.hidden [H, H] -> enc.out [H, d] -> sum per task
//   lgm   lgm.in [dx, H] -> lgm.hidden [H, H] -> lgm.out [H, dy*d + 2dy]   (W, b, raw noise)
//   dec   dec.in [dx+d, H] -> dec.hidden [H, H] -> dec.out [H, 2dy]         (not used by lgm)
//   prior weight = mu0 [1, d], bias = raw var0 [d]                       (learn_prior only)
// All hidden activations are tanh.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "brm/aggregation.hpp"
#include "brm/diffmath.hpp"
#include "brm/tasks.hpp"

namespace brm {

enum class AggregatorKind { brm, lgm, np, gqn };

std::string_view to_string(AggregatorKind kind);
AggregatorKind parse_aggregator(std::string_view name);

struct ModelConfig {
  AggregatorKind aggregator = AggregatorKind::brm;
  int latent_dim = 8;
  int dx = 1;
  int dy = 1;
  int group_size = 1;
  int hidden = 128;
  bool learn_prior = false;
  /// Encode a trailing short group instead of dropping it.
  bool keep_partial_group = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct Model {
  ModelConfig config;
  MlpParams params;
};

Model make_model(const ModelConfig& config, std::uint64_t seed);

/// Checkpoint = parameter manifest with the model config as header.
void save_model(const Model& model, const std::filesystem::path& stem, nlohmann::json extra = {});
Model load_model(const std::filesystem::path& stem, nlohmann::json* extra = nullptr);

GaussianBelief<double> prior_belief(const Model& model);

// ---------------------------------------------------------------------------
// Batched tape forward

struct LayerVars {
  Var weight;
  Var bias;
};
using BoundParams = std::map<std::string, LayerVars>;

/// Parameters as gradient-carrying leaves (training).
BoundParams bind(Tape& tape, MlpParams& params);
/// Parameters as constants (evaluation; params are only read).
BoundParams bind_frozen(Tape& tape, const MlpParams& params);

/// Several contexts flattened into one row-per-point layout, with the
/// point -> group -> task maps the segment ops need.
struct Batch {
  int tasks = 0;
  int groups = 0;
  Matrix x;                      // P x dx
  Matrix y;                      // P x dy
  std::vector<int> point_task;   // P
  std::vector<int> point_group;  // P
  std::vector<int> group_task;   // groups
  std::vector<int> groups_per_task;
  std::vector<int> points_per_task;

  Eigen::Index points() const { return x.rows(); }

  /// Groups consecutive points in blocks of group_size. When group_size does
  /// not divide a context, the trailing block is dropped (with a warning)
  /// unless keep_partial is set.
  static Batch build(std::span<const ContextSet> contexts, int group_size, bool keep_partial);
};

/// Per-task posterior on the tape. For gqn, `var` is unset and `mu` is the
/// point estimate.
struct PosteriorNodes {
  Var mu;                 // tasks x d
  std::optional<Var> var;  // tasks x d
  std::optional<Var> f;           // groups x d (brm only)
  std::optional<Var> delta_prec;  // groups x d (brm only)
};

struct PriorNodes {
  Var mu;   // 1 x d
  Var var;  // 1 x d
};

PriorNodes prior_nodes(Tape& tape, const BoundParams& params, const ModelConfig& config);
PosteriorNodes posterior(Tape& tape, const BoundParams& params, const ModelConfig& config, const Batch& batch);

struct PredictiveNodes {
  Var mean;  // rows x dy
  Var var;   // rows x dy
};

/// Decoder likelihood for query rows x (rows x dx) and latent rows h (rows x d).
PredictiveNodes decode(Tape& tape, const BoundParams& params, const ModelConfig& config, Var x, Var h);

/// Per-row sum over output coordinates of log N(y; mean, var): rows x 1.
Var gaussian_logpdf_rows(Tape& tape, Var y, const PredictiveNodes& predictive);

/// Differentiable diagonal KL(q || p) per row: rows x 1. p is a single row.
Var kl_rows(Var q_mu, Var q_var, const PriorNodes& p);

// ---------------------------------------------------------------------------
// Single-context evaluation (frozen parameters)

/// Encodes one group of (x, y) pairs (brm models only).
NaturalIncrement<double> encode_group(const Model& model, const ContextSet& group);

struct Predictive {
  Vector mean;
  Vector var;
};
Predictive decode(const Model& model, const Vector& x, const Vector& h);

/// W(x), b(x), noise variance G(x) from the lgm heads, with y attached.
LinearGaussianObservation<double> lgm_heads(const Model& model, const Vector& x, const Vector& y);

/// Increment whose brm aggregation reproduces one conjugate linear-Gaussian
/// update of `prior`:  delta = diag(W^T G^-1 W),
///   f = (prec0 + delta)^-1 (W^T G^-1 (y - b) + prec0 mu0).
NaturalIncrement<double> lgm_realization(const LinearGaussianObservation<double>& obs,
                                         const GaussianBelief<double>& prior);
/// Same for a whole group of observations encoded jointly.
NaturalIncrement<double> lgm_group_realization(std::span<const LinearGaussianObservation<double>> group,
                                               const GaussianBelief<double>& prior);

}  // namespace brm

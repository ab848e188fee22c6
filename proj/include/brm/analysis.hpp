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

// Evaluation metrics for trained models and numerical checks of the
// asymptotic behaviour of Bayes posteriors: Bayes-risk decay, posterior
// variance decay and convergence to the Bernstein-von Mises Gaussian.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brm/aggregation.hpp"
#include "brm/models.hpp"
#include "brm/tasks.hpp"
#include "brm/training.hpp"

namespace brm {

/// Runs body(i) for i in [0, n) on up to `threads` workers (0 = hardware
/// concurrency). Callers write results into per-index slots and reduce in
/// index order afterwards, which keeps results independent of thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // across tasks / trials
  int count = 0;

  static MeanStd of(std::span<const double> values);
};

/// Least-squares slope of log(values) against log(n). Requires at least four
/// strictly increasing n values and positive values.
double fit_loglog_slope(std::span<const double> n, std::span<const double> values);

// ---------------------------------------------------------------------------
// Trained-model evaluation

struct EvalOptions {
  int queries_per_task = 32;
  int mc_samples = 128;
  std::uint64_t seed = 0;
  int threads = 0;
  /// Optional replacement encoder (see InferOptions::increments).
  IncrementSource increments;
};

/// Mean over tasks of the per-task average of log[(1/S) sum_s q(y*|x*, h_s)]
/// on held-out queries, with contexts of N points.
MeanStd predictive_ll(const Model& model, std::span<const TaskInstance> tasks, int n, const EvalOptions& options);

struct CurvePoint {
  int n = 0;
  MeanStd value;
};

/// Squared error of the point prediction (decoder mean at the posterior mean
/// latent) against the noiseless target.
std::vector<CurvePoint> mse_curve(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> n_list,
                                  const EvalOptions& options);

struct VarianceCurve {
  std::vector<CurvePoint> points;  // mean trace(var); ||point|| for gqn
  double slope = 0.0;
};

VarianceCurve variance_curve(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> n_list,
                             const EvalOptions& options);

struct EvalRow {
  int n = 0;
  int tasks = 0;
  MeanStd log_likelihood;
  MeanStd mse;
  MeanStd spread;  // trace of posterior var (norm of the point for gqn)
};

struct EvalReport {
  std::string method;
  std::vector<EvalRow> rows;
  nlohmann::json metadata;

  void write_csv(std::ostream& out) const;
  nlohmann::json to_json() const;
};

EvalReport evaluate(const Model& model, const std::string& method, std::span<const TaskInstance> tasks,
                    std::span<const int> n_list, const EvalOptions& options);

// ---------------------------------------------------------------------------
// Observation models with a scalar-or-vector latent and known likelihood

struct ObservationModel {
  enum class Kind { gaussian_mean, tanh_link };

  Kind kind = Kind::gaussian_mean;
  int latent_dim = 1;
  double noise_var = 1.0;

  /// y = h + eps, eps ~ N(0, noise_var I); conjugate with a Gaussian prior.
  static ObservationModel gaussian_mean(int latent_dim, double noise_var = 1.0);
  /// y = tanh(h) x + eps, x ~ U(-2, 2), eps ~ N(0, noise_var); scalar latent.
  static ObservationModel tanh_link(double noise_var = 0.25);

  bool conjugate() const { return kind == Kind::gaussian_mean; }
  /// log p(y | x, h) for a scalar latent.
  double log_likelihood(double h, double x, double y) const;
  /// Fisher information per observation at h (scalar latent).
  double fisher_information(double h) const;
  /// Draws n points (x, y) given a scalar latent h.
  ContextSet sample(double h, Eigen::Index n, Rng& rng) const;
};

struct RiskRow {
  int n = 0;
  int trials = 0;
  double mean_kl = 0.0;
  double std_error = 0.0;
  double reference = 0.0;  // d / (2N)
  double ratio = 0.0;      // mean_kl / reference
};

/// Monte-Carlo estimate of E[KL(p(y|h*) || p(y|D_N))] with h* ~ N(0, I) and
/// nested datasets D_8 c D_32 c ... per trial. Conjugate models only.
std::vector<RiskRow> bayes_risk_curve(const ObservationModel& model, std::span<const int> n_list, int trials,
                                      std::uint64_t seed, int threads = 0);

struct GridOptions {
  double low = -6.0;
  double high = 6.0;
  int nodes = 4097;
};

using PointLogLikelihood = std::function<double(double h, double x, double y)>;

/// Posterior over a scalar latent evaluated on a uniform grid and normalized
/// with the trapezoid rule.
class GridPosterior {
 public:
  GridPosterior(Vector grid, Vector log_weights);

  const Vector& grid() const { return grid_; }
  const Vector& log_weights() const { return log_weights_; }
  /// Trapezoid quadrature weights times normalized density; sums to 1.
  const Vector& weights() const { return weights_; }
  /// log of the trapezoid integral of exp(log_weights).
  double log_normalizer() const { return log_normalizer_; }
  double step() const { return grid_[1] - grid_[0]; }

  double mean() const;
  double variance() const;
  /// Normalized posterior density at the grid nodes.
  Vector density() const;
  /// 0.5 * integral |p - q| over the grid.
  double tv_distance(double mu, double var) const;
  double tv_distance(const GaussianBelief<double>& other) const;

 private:
  Vector grid_;
  Vector log_weights_;
  Vector weights_;
  Vector trapezoid_;
  double log_normalizer_ = 0.0;
};

/// Brute-force posterior for a scalar latent. An absent prior means a flat
/// prior on the grid.
GridPosterior grid_posterior(const PointLogLikelihood& log_likelihood, const ContextSet& context,
                             const std::optional<GaussianBelief<double>>& prior, const GridOptions& grid = {});

/// Golden-section maximization of the context log-likelihood, bracketed
/// around the best grid node; absolute tolerance `tol`.
double maximum_likelihood(const PointLogLikelihood& log_likelihood, const ContextSet& context,
                          const GridOptions& grid = {}, double tol = 1e-8);

struct BvmRow {
  int n = 0;
  int trials = 0;
  MeanStd tv;
  double max_tv = 0.0;
};

struct BvmOptions {
  /// Prior of the grid posterior; nullopt = flat.
  std::optional<GaussianBelief<double>> prior = GaussianBelief<double>::standard(1);
  GridOptions grid;
  std::uint64_t seed = 0;
  int threads = 0;
};

/// Total-variation distance between the grid posterior and N(h_mle, 1/(N I(h*)))
/// over nested datasets from p(. | h*).
std::vector<BvmRow> bvm_check(const ObservationModel& model, double h_star, std::span<const int> n_list, int trials,
                              const BvmOptions& options = {});

}  // namespace brm

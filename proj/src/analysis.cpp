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

#include "brm/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <thread>

#include <fmt/format.h>

#include "brm/errors.hpp"

namespace brm {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            body(i);
          } catch (...) {
            if (!failed.exchange(true)) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

MeanStd MeanStd::of(std::span<const double> values) {
  MeanStd out;
  out.count = static_cast<int>(values.size());
  if (values.empty()) return out;
  double total = 0.0;
  for (double v : values) total += v;
  out.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

double fit_loglog_slope(std::span<const double> n, std::span<const double> values) {
  if (n.size() != values.size()) throw ShapeError("fit_loglog_slope: n and values differ in length");
  if (n.size() < 4) throw DomainError("fit_loglog_slope: need at least 4 points");
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!(n[i] > 0.0) || !(values[i] > 0.0)) throw DomainError("fit_loglog_slope: values must be positive");
    if (i > 0 && !(n[i] > n[i - 1])) throw DomainError("fit_loglog_slope: n must be strictly increasing");
  }
  const auto k = static_cast<double>(n.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    sx += std::log(n[i]);
    sy += std::log(values[i]);
  }
  const double mx = sx / k, my = sy / k;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double dx = std::log(n[i]) - mx;
    sxy += dx * (std::log(values[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Trained-model evaluation

namespace {

struct TaskMetrics {
  double log_likelihood = 0.0;
  double mse = 0.0;
  double spread = 0.0;
};

enum Metric : unsigned { kLogLikelihood = 1, kMse = 2, kSpread = 4 };

TaskMetrics evaluate_task(const Model& model, const TaskInstance& task, std::size_t index, int n,
                          const EvalOptions& options, unsigned metrics) {
  const auto t = static_cast<std::uint64_t>(index);
  const ContextSet context = sample_context(task, n, derive_seed(options.seed, {t, static_cast<std::uint64_t>(n), 1}));
  const ContextSet queries = sample_context(task, options.queries_per_task, derive_seed(options.seed, {t, 2}));
  const GaussianBelief<double> post = infer_posterior(model, context, options.increments);
  const bool point_mass = model.config.aggregator == AggregatorKind::gqn && !options.increments;
  const Eigen::Index d = model.config.latent_dim;
  const Eigen::Index Q = queries.size();

  TaskMetrics out;
  out.spread = point_mass ? post.mu.norm() : post.var.sum();

  if (metrics & kMse) {
    Tape tape;
    BoundParams params = bind_frozen(tape, model.params);
    Matrix h = post.mu.transpose().replicate(Q, 1);
    PredictiveNodes pred = decode(tape, params, model.config, tape.constant(queries.x), tape.constant(std::move(h)));
    double se = 0.0;
    for (Eigen::Index q = 0; q < Q; ++q) {
      const double err = pred.mean.value()(q, 0) - task.mean(queries.x(q, 0));
      se += err * err;
    }
    out.mse = se / static_cast<double>(Q);
  }

  if (metrics & kLogLikelihood) {
    const int S = point_mass ? 1 : options.mc_samples;
    Rng rng(derive_seed(options.seed, {t, static_cast<std::uint64_t>(n), 3}));
    Matrix noise(S, d);
    fill_standard_normal(noise, rng);
    Matrix samples = (noise.array().rowwise() * post.var.cwiseSqrt().transpose().array()).rowwise() +
                     post.mu.transpose().array();
    Matrix h(S * Q, d), x(S * Q, queries.x.cols()), y(S * Q, queries.y.cols());
    for (int s = 0; s < S; ++s) {
      h.middleRows(s * Q, Q) = samples.row(s).replicate(Q, 1);
      x.middleRows(s * Q, Q) = queries.x;
      y.middleRows(s * Q, Q) = queries.y;
    }
    Tape tape;
    BoundParams params = bind_frozen(tape, model.params);
    PredictiveNodes pred = decode(tape, params, model.config, tape.constant(std::move(x)), tape.constant(std::move(h)));
    const Matrix& logp = gaussian_logpdf_rows(tape, tape.constant(std::move(y)), pred).value();
    double total = 0.0;
    for (Eigen::Index q = 0; q < Q; ++q) {
      double peak = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < S; ++s) peak = std::max(peak, logp(s * Q + q, 0));
      double acc = 0.0;
      for (int s = 0; s < S; ++s) acc += std::exp(logp(s * Q + q, 0) - peak);
      total += peak + std::log(acc / S);
    }
    out.log_likelihood = total / static_cast<double>(Q);
  }
  return out;
}

std::vector<TaskMetrics> evaluate_tasks(const Model& model, std::span<const TaskInstance> tasks, int n,
                                        const EvalOptions& options, unsigned metrics) {
  if (n < 0) throw DomainError("evaluation: negative context size");
  std::vector<TaskMetrics> out(tasks.size());
  parallel_for(tasks.size(), options.threads,
               [&](std::size_t i) { out[i] = evaluate_task(model, tasks[i], i, n, options, metrics); });
  return out;
}

template <typename Field>
MeanStd summarize(const std::vector<TaskMetrics>& metrics, Field field) {
  std::vector<double> values;
  values.reserve(metrics.size());
  for (const auto& m : metrics) values.push_back(m.*field);
  return MeanStd::of(values);
}

void check_n_list(std::span<const int> n_list, std::size_t minimum, const char* op) {
  if (n_list.size() < minimum) {
    throw DomainError(std::string(op) + ": need at least " + std::to_string(minimum) + " N values");
  }
  for (std::size_t i = 1; i < n_list.size(); ++i) {
    if (n_list[i] <= n_list[i - 1]) throw DomainError(std::string(op) + ": N values must be strictly increasing");
  }
}

}  // namespace

MeanStd predictive_ll(const Model& model, std::span<const TaskInstance> tasks, int n, const EvalOptions& options) {
  if (options.mc_samples < 2) throw DomainError("predictive_ll: need at least 2 Monte-Carlo samples");
  return summarize(evaluate_tasks(model, tasks, n, options, kLogLikelihood), &TaskMetrics::log_likelihood);
}

std::vector<CurvePoint> mse_curve(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> n_list,
                                  const EvalOptions& options) {
  std::vector<CurvePoint> out;
  for (int n : n_list) out.push_back({n, summarize(evaluate_tasks(model, tasks, n, options, kMse), &TaskMetrics::mse)});
  return out;
}

VarianceCurve variance_curve(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> n_list,
                             const EvalOptions& options) {
  check_n_list(n_list, 4, "variance_curve");
  VarianceCurve out;
  std::vector<double> ns, values;
  for (int n : n_list) {
    MeanStd s = summarize(evaluate_tasks(model, tasks, n, options, kSpread), &TaskMetrics::spread);
    out.points.push_back({n, s});
    ns.push_back(n);
    values.push_back(s.mean);
  }
  out.slope = fit_loglog_slope(ns, values);
  return out;
}

EvalReport evaluate(const Model& model, const std::string& method, std::span<const TaskInstance> tasks,
                    std::span<const int> n_list, const EvalOptions& options) {
  check_n_list(n_list, 1, "evaluate");
  EvalReport report;
  report.method = method;
  for (int n : n_list) {
    const auto metrics = evaluate_tasks(model, tasks, n, options, kLogLikelihood | kMse | kSpread);
    report.rows.push_back({n, static_cast<int>(tasks.size()), summarize(metrics, &TaskMetrics::log_likelihood),
                           summarize(metrics, &TaskMetrics::mse), summarize(metrics, &TaskMetrics::spread)});
  }
  report.metadata = {{"method", method},
                     {"aggregator", std::string(to_string(model.config.aggregator))},
                     {"tasks", tasks.size()},
                     {"queries_per_task", options.queries_per_task},
                     {"mc_samples", options.mc_samples},
                     {"seed", options.seed}};
  return report;
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "method,n,tasks,ll_mean,ll_std,mse_mean,mse_std,spread_mean,spread_std\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", method, r.n, r.tasks,
                       r.log_likelihood.mean, r.log_likelihood.std, r.mse.mean, r.mse.std, r.spread.mean,
                       r.spread.std);
  }
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"n", r.n},
                         {"tasks", r.tasks},
                         {"ll_mean", r.log_likelihood.mean},
                         {"ll_std", r.log_likelihood.std},
                         {"mse_mean", r.mse.mean},
                         {"mse_std", r.mse.std},
                         {"spread_mean", r.spread.mean},
                         {"spread_std", r.spread.std}});
  }
  return {{"method", method}, {"rows", rows_json}, {"metadata", metadata}};
}

// ---------------------------------------------------------------------------
// Observation models

ObservationModel ObservationModel::gaussian_mean(int latent_dim, double noise_var) {
  if (latent_dim < 1 || !(noise_var > 0.0)) throw DomainError("gaussian_mean model: invalid parameters");
  return {Kind::gaussian_mean, latent_dim, noise_var};
}

ObservationModel ObservationModel::tanh_link(double noise_var) {
  if (!(noise_var > 0.0)) throw DomainError("tanh_link model: noise variance must be positive");
  return {Kind::tanh_link, 1, noise_var};
}

double ObservationModel::log_likelihood(double h, double x, double y) const {
  const double mean = kind == Kind::gaussian_mean ? h : std::tanh(h) * x;
  const double r = y - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * noise_var) + r * r / noise_var);
}

double ObservationModel::fisher_information(double h) const {
  if (kind == Kind::gaussian_mean) return 1.0 / noise_var;
  // E[x^2] = 4/3 for x ~ U(-2, 2); d tanh / dh = 1 - tanh^2.
  const double slope = 1.0 - std::tanh(h) * std::tanh(h);
  return (4.0 / 3.0) * slope * slope / noise_var;
}

ContextSet ObservationModel::sample(double h, Eigen::Index n, Rng& rng) const {
  std::uniform_real_distribution<double> uniform(kInputLow, kInputHigh);
  std::normal_distribution<double> normal(0.0, 1.0);
  ContextSet out;
  out.x.resize(n, 1);
  out.y.resize(n, 1);
  const double sd = std::sqrt(noise_var);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.x(i, 0) = uniform(rng);
    const double mean = kind == Kind::gaussian_mean ? h : std::tanh(h) * out.x(i, 0);
    out.y(i, 0) = mean + sd * normal(rng);
  }
  return out;
}

std::vector<RiskRow> bayes_risk_curve(const ObservationModel& model, std::span<const int> n_list, int trials,
                                      std::uint64_t seed, int threads) {
  if (!model.conjugate()) throw DomainError("bayes_risk_curve: the observation model has no analytic posterior");
  if (trials < 2) throw DomainError("bayes_risk_curve: need at least 2 trials");
  check_n_list(n_list, 1, "bayes_risk_curve");
  if (n_list.front() < 1) throw DomainError("bayes_risk_curve: N must be positive");
  const int d = model.latent_dim;
  const double s2 = model.noise_var;
  const int n_max = n_list.back();
  std::vector<double> kl(static_cast<std::size_t>(trials) * n_list.size());

  parallel_for(static_cast<std::size_t>(trials), threads, [&](std::size_t trial) {
    Rng rng(derive_seed(seed, {trial}));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector h_star(d);
    for (int i = 0; i < d; ++i) h_star[i] = normal(rng);
    Vector running = Vector::Zero(d);
    int seen = 0;
    const double sd = std::sqrt(s2);
    for (std::size_t k = 0; k < n_list.size(); ++k) {
      for (; seen < n_list[k] && seen < n_max; ++seen) {
        for (int i = 0; i < d; ++i) running[i] += h_star[i] + sd * normal(rng);
      }
      // Posterior N(mu, v) per coordinate under the N(0, 1) prior; the
      // predictive is N(mu, s2 + v).
      const double precision = 1.0 + seen / s2;
      const double v = 1.0 / precision;
      double total = 0.0;
      for (int i = 0; i < d; ++i) {
        const double mu = running[i] / s2 * v;
        const double pv = s2 + v;
        const double diff = h_star[i] - mu;
        total += 0.5 * (std::log(pv / s2) + (s2 + diff * diff) / pv - 1.0);
      }
      kl[trial * n_list.size() + k] = total;
    }
  });

  std::vector<RiskRow> rows;
  for (std::size_t k = 0; k < n_list.size(); ++k) {
    std::vector<double> values(static_cast<std::size_t>(trials));
    for (std::size_t t = 0; t < values.size(); ++t) values[t] = kl[t * n_list.size() + k];
    const MeanStd s = MeanStd::of(values);
    RiskRow row;
    row.n = n_list[k];
    row.trials = trials;
    row.mean_kl = s.mean;
    row.std_error = s.std / std::sqrt(static_cast<double>(trials));
    row.reference = d / (2.0 * n_list[k]);
    row.ratio = row.mean_kl / row.reference;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Grid posterior

GridPosterior::GridPosterior(Vector grid, Vector log_weights)
    : grid_(std::move(grid)), log_weights_(std::move(log_weights)) {
  if (grid_.size() < 2 || grid_.size() != log_weights_.size()) throw ShapeError("GridPosterior: bad grid");
  const Eigen::Index n = grid_.size();
  trapezoid_ = Vector::Constant(n, step());
  trapezoid_[0] *= 0.5;
  trapezoid_[n - 1] *= 0.5;
  const double peak = log_weights_.maxCoeff();
  if (!std::isfinite(peak)) throw DomainError("grid_posterior: every log-weight is -inf (or non-finite)");
  const double integral = (trapezoid_.array() * (log_weights_.array() - peak).exp()).sum();
  log_normalizer_ = peak + std::log(integral);
  weights_ = (trapezoid_.array() * (log_weights_.array() - log_normalizer_).exp()).matrix();
}

Vector GridPosterior::density() const { return (log_weights_.array() - log_normalizer_).exp().matrix(); }

double GridPosterior::mean() const { return weights_.dot(grid_); }

double GridPosterior::variance() const {
  const double m = mean();
  return (weights_.array() * (grid_.array() - m).square()).sum();
}

double GridPosterior::tv_distance(double mu, double var) const {
  if (!(var > 0.0)) throw DomainError("tv_distance: variance must be positive");
  const Vector p = density();
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi * var);
  double total = 0.0;
  for (Eigen::Index i = 0; i < grid_.size(); ++i) {
    const double z = grid_[i] - mu;
    const double q = norm * std::exp(-0.5 * z * z / var);
    total += trapezoid_[i] * std::abs(p[i] - q);
  }
  return std::clamp(0.5 * total, 0.0, 1.0);
}

double GridPosterior::tv_distance(const GaussianBelief<double>& other) const {
  if (other.dim() != 1) throw ShapeError("tv_distance: grid posteriors are one-dimensional");
  return tv_distance(other.mu[0], other.var[0]);
}

namespace {

Vector make_grid(const GridOptions& g) {
  if (g.nodes < 2 || !(g.high > g.low)) throw DomainError("grid: need at least 2 nodes on a non-empty interval");
  return Vector::LinSpaced(g.nodes, g.low, g.high);
}

double context_log_likelihood(const PointLogLikelihood& f, const ContextSet& context, double h) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < context.size(); ++i) total += f(h, context.x(i, 0), context.y(i, 0));
  return total;
}

}  // namespace

GridPosterior grid_posterior(const PointLogLikelihood& log_likelihood, const ContextSet& context,
                             const std::optional<GaussianBelief<double>>& prior, const GridOptions& grid) {
  if (prior && prior->dim() != 1) throw ShapeError("grid_posterior: latent dimension must be 1");
  if (prior) prior->validate();
  Vector nodes = make_grid(grid);
  Vector log_w(nodes.size());
  for (Eigen::Index i = 0; i < nodes.size(); ++i) {
    double lw = context_log_likelihood(log_likelihood, context, nodes[i]);
    if (prior) {
      const double z = nodes[i] - prior->mu[0];
      lw += -0.5 * (std::log(2.0 * std::numbers::pi * prior->var[0]) + z * z / prior->var[0]);
    }
    log_w[i] = std::isnan(lw) ? -std::numeric_limits<double>::infinity() : lw;
  }
  return GridPosterior(std::move(nodes), std::move(log_w));
}

double maximum_likelihood(const PointLogLikelihood& log_likelihood, const ContextSet& context, const GridOptions& grid,
                          double tol) {
  const Vector nodes = make_grid(grid);
  Eigen::Index best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < nodes.size(); ++i) {
    const double v = context_log_likelihood(log_likelihood, context, nodes[i]);
    if (v > best_value) {
      best_value = v;
      best = i;
    }
  }
  double a = nodes[std::max<Eigen::Index>(best - 1, 0)];
  double b = nodes[std::min<Eigen::Index>(best + 1, nodes.size() - 1)];
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - ratio * (b - a), e = a + ratio * (b - a);
  double fc = context_log_likelihood(log_likelihood, context, c);
  double fe = context_log_likelihood(log_likelihood, context, e);
  while (b - a > tol) {
    if (fc > fe) {
      b = e;
      e = c;
      fe = fc;
      c = b - ratio * (b - a);
      fc = context_log_likelihood(log_likelihood, context, c);
    } else {
      a = c;
      c = e;
      fc = fe;
      e = a + ratio * (b - a);
      fe = context_log_likelihood(log_likelihood, context, e);
    }
  }
  return 0.5 * (a + b);
}

std::vector<BvmRow> bvm_check(const ObservationModel& model, double h_star, std::span<const int> n_list, int trials,
                              const BvmOptions& options) {
  if (model.latent_dim != 1) throw DomainError("bvm_check: scalar latent required");
  if (trials < 1) throw DomainError("bvm_check: need at least one trial");
  check_n_list(n_list, 1, "bvm_check");
  const double fisher = model.fisher_information(h_star);
  if (!(fisher >= 1e-8)) throw DomainError("bvm_check: Fisher information below 1e-8 (singular model)");
  const PointLogLikelihood loglik = [&model](double h, double x, double y) { return model.log_likelihood(h, x, y); };

  std::vector<double> tv(static_cast<std::size_t>(trials) * n_list.size());
  parallel_for(static_cast<std::size_t>(trials), options.threads, [&](std::size_t trial) {
    Rng rng(derive_seed(options.seed, {trial}));
    const ContextSet data = model.sample(h_star, n_list.back(), rng);
    for (std::size_t k = 0; k < n_list.size(); ++k) {
      const ContextSet prefix = data.slice(0, n_list[k]);
      const GridPosterior post = grid_posterior(loglik, prefix, options.prior, options.grid);
      const double mle = maximum_likelihood(loglik, prefix, options.grid);
      tv[trial * n_list.size() + k] = post.tv_distance(mle, 1.0 / (n_list[k] * fisher));
    }
  });

  std::vector<BvmRow> rows;
  for (std::size_t k = 0; k < n_list.size(); ++k) {
    std::vector<double> values(static_cast<std::size_t>(trials));
    for (std::size_t t = 0; t < values.size(); ++t) values[t] = tv[t * n_list.size() + k];
    rows.push_back({n_list[k], trials, MeanStd::of(values), *std::max_element(values.begin(), values.end())});
  }
  return rows;
}

}  // namespace brm

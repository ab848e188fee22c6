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

#include "brm/verify.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <fmt/format.h>

#include "brm/analysis.hpp"
#include "brm/errors.hpp"
#include "brm/models.hpp"
#include "brm/training.hpp"

namespace brm {

nlohmann::json PropertyResult::to_json() const {
  return {{"name", name},       {"passed", passed}, {"measured", measured},
          {"bound", bound},     {"detail", detail}, {"seconds", seconds}};
}

std::string PropertyResult::line() const {
  return fmt::format("{} {:<22} measured={:<12.6g} bound={:<10.3g} {} [{:.1f}s]", passed ? "PASS" : "FAIL", name,
                     measured, bound, detail, seconds);
}

namespace {

using Clock = std::chrono::steady_clock;

struct Context {
  const VerifyOptions& options;
  AggregateFn aggregate;
};

Vector normal_vector(Eigen::Index n, Rng& rng) {
  Vector v(n);
  fill_standard_normal(v, rng);
  return v;
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

GaussianBelief<double> random_belief(Eigen::Index d, Rng& rng) {
  GaussianBelief<double> b;
  b.mu = normal_vector(d, rng);
  b.var.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) b.var[i] = log_uniform(rng, 0.1, 10.0);
  return b;
}

std::vector<NaturalIncrement<double>> random_increments(int m, Eigen::Index d, Rng& rng) {
  std::vector<NaturalIncrement<double>> out(static_cast<std::size_t>(m));
  for (auto& inc : out) {
    inc.f = normal_vector(d, rng);
    inc.delta_prec.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) inc.delta_prec[i] = log_uniform(rng, 1e-3, 10.0);
  }
  return out;
}

LinearGaussianObservation<double> random_observation(Eigen::Index d, Eigen::Index dy, Rng& rng) {
  LinearGaussianObservation<double> o;
  o.W = Eigen::MatrixXd(dy, d);
  for (Eigen::Index r = 0; r < dy; ++r) o.W.row(r) = normal_vector(d, rng).transpose();
  o.b = normal_vector(dy, rng);
  o.y = normal_vector(dy, rng);
  o.noise_var.resize(dy);
  for (Eigen::Index r = 0; r < dy; ++r) o.noise_var[r] = log_uniform(rng, 0.05, 2.0);
  return o;
}

/// Conjugate diagonal update of an arbitrary Gaussian prior, written out
/// directly from the linear-Gaussian likelihood.
GaussianBelief<double> conjugate_update(std::span<const LinearGaussianObservation<double>> obs,
                                        const GaussianBelief<double>& prior) {
  Vector precision = prior.var.cwiseInverse();
  Vector score = precision.cwiseProduct(prior.mu);
  for (const auto& o : obs) {
    const Eigen::VectorXd ginv = o.noise_var.cwiseInverse();
    precision += (o.W.transpose() * ginv.asDiagonal() * o.W).diagonal();
    score += o.W.transpose() * ginv.asDiagonal() * (o.y - o.b);
  }
  return {score.cwiseQuotient(precision), precision.cwiseInverse()};
}

double max_abs_diff(const GaussianBelief<double>& a, const GaussianBelief<double>& b) {
  if (a.dim() != b.dim()) return std::numeric_limits<double>::infinity();
  const double dm = (a.mu - b.mu).cwiseAbs().maxCoeff();
  const double dv = (a.var - b.var).cwiseAbs().maxCoeff();
  return std::max(dm, dv);
}

ContextSet random_context(Rng& rng, Eigen::Index n) {
  TaskInstance task = sample_task(TaskKind::linear, rng());
  return sample_context(task, n, rng());
}

ModelConfig small_config(AggregatorKind kind, int latent_dim, int hidden) {
  ModelConfig c;
  c.aggregator = kind;
  c.latent_dim = latent_dim;
  c.hidden = hidden;
  return c;
}

// ---------------------------------------------------------------------------

PropertyResult gradient_check(const Context& ctx) {
  constexpr int kSeeds = 100;
  constexpr int kCoordinates = 6;
  constexpr double kStep = 1e-5;
  constexpr double kBound = 1e-4;
  const AggregatorKind kinds[] = {AggregatorKind::brm, AggregatorKind::np, AggregatorKind::gqn, AggregatorKind::lgm};
  std::vector<double> worst(kSeeds, 0.0);

  parallel_for(kSeeds, ctx.options.threads, [&](std::size_t s) {
    Rng rng(derive_seed(ctx.options.seed, {1, s}));
    ModelConfig config = small_config(kinds[s % 4], 2, 6);
    if (config.aggregator == AggregatorKind::brm) config.group_size = 1 + static_cast<int>((s / 4) % 2);
    if (config.aggregator == AggregatorKind::brm || config.aggregator == AggregatorKind::np) {
      config.learn_prior = (s / 8) % 2 == 1;
    }
    Model model = make_model(config, rng());
    std::vector<ContextSet> contexts = {random_context(rng, 4), random_context(rng, 6)};
    const Batch post = Batch::build(contexts, config.group_size, false);
    const Batch lik = Batch::build(contexts, 1, true);
    const std::uint64_t noise_seed = rng();

    auto loss = [&](bool with_grad) {
      Tape tape;
      BoundParams params = bind(tape, model.params);
      Rng noise(noise_seed);
      ElboNodes nodes = elbo(tape, params, config, post, lik, 2, noise);
      if (with_grad) tape.backward(nodes.loss);
      return nodes.loss.value()(0, 0);
    };

    model.params.zero_grad();
    loss(true);

    struct Coordinate {
      Param* param;
      std::size_t index;
    };
    std::vector<Coordinate> all;
    for (auto& [name, layer] : model.params.layers()) {
      for (Param* p : {&layer.weight, &layer.bias}) {
        for (std::size_t i = 0; i < p->value.data().size(); ++i) all.push_back({p, i});
      }
    }
    std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
    for (int k = 0; k < kCoordinates; ++k) {
      const Coordinate c = all[pick(rng)];
      double& theta = c.param->value.data()[c.index];
      const double analytic = c.param->grad.data()[c.index];
      const double saved = theta;
      theta = saved + kStep;
      const double up = loss(false);
      theta = saved - kStep;
      const double down = loss(false);
      theta = saved;
      const double numeric = (up - down) / (2.0 * kStep);
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst[s] = std::max(worst[s], std::abs(analytic - numeric) / scale);
    }
  });

  const auto it = std::max_element(worst.begin(), worst.end());
  const double measured = *it;
  return {"gradient_check", measured <= kBound, measured, kBound,
          fmt::format("{} models x {} coordinates, worst seed {}", kSeeds, kCoordinates, it - worst.begin())};
}

PropertyResult permutation_invariance(const Context& ctx) {
  constexpr double kBound = 1e-12;
  Rng rng(derive_seed(ctx.options.seed, {2}));
  double measured = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index d = uniform_int(rng, 1, 4);
    auto incs = random_increments(uniform_int(rng, 1, 40), d, rng);
    const auto prior = random_belief(d, rng);
    const auto base = ctx.aggregate(incs, prior);
    std::shuffle(incs.begin(), incs.end(), rng);
    measured = std::max(measured, max_abs_diff(base, ctx.aggregate(incs, prior)));
  }
  for (AggregatorKind kind : {AggregatorKind::brm, AggregatorKind::np, AggregatorKind::gqn, AggregatorKind::lgm}) {
    for (int trial = 0; trial < 5; ++trial) {
      Model model = make_model(small_config(kind, 3, 16), rng());
      ContextSet context = random_context(rng, 20);
      std::vector<Eigen::Index> order(static_cast<std::size_t>(context.size()));
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      ContextSet shuffled = context;
      for (std::size_t i = 0; i < order.size(); ++i) {
        shuffled.x.row(static_cast<Eigen::Index>(i)) = context.x.row(order[i]);
        shuffled.y.row(static_cast<Eigen::Index>(i)) = context.y.row(order[i]);
      }
      measured = std::max(measured, max_abs_diff(infer_posterior(model, context), infer_posterior(model, shuffled)));
    }
  }
  return {"permutation_invariance", measured <= kBound, measured, kBound,
          "max |difference| over shuffled increments and contexts (all aggregators)"};
}

PropertyResult prior_recovery(const Context& ctx) {
  Rng rng(derive_seed(ctx.options.seed, {3}));
  double measured = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto prior = random_belief(uniform_int(rng, 1, 6), rng);
    measured = std::max(measured, max_abs_diff(ctx.aggregate({}, prior), prior));
  }
  for (bool learn : {false, true}) {
    ModelConfig config = small_config(AggregatorKind::brm, 4, 16);
    config.learn_prior = learn;
    Model model = make_model(config, rng());
    if (learn) {
      // Move the learned prior away from N(0, I) so the check is not trivial.
      Layer& p = model.params.layer("prior");
      p.weight.value.matrix().setConstant(0.3);
      p.bias.value.matrix().setConstant(-0.2);
    }
    ContextSet empty;
    empty.x.resize(0, 1);
    empty.y.resize(0, 1);
    measured = std::max(measured, max_abs_diff(infer_posterior(model, empty), prior_belief(model)));
  }
  return {"prior_recovery", measured == 0.0, measured, 0.0, "N = 0 must return the prior exactly"};
}

PropertyResult monotone_contraction(const Context& ctx) {
  Rng rng(derive_seed(ctx.options.seed, {4}));
  double measured = 0.0;  // largest increase of any variance coordinate
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d = uniform_int(rng, 1, 4);
    const auto prior = random_belief(d, rng);
    const auto incs = random_increments(40, d, rng);
    Vector previous = prior.var;
    for (std::size_t m = 1; m <= incs.size(); ++m) {
      const auto post = ctx.aggregate(std::span(incs).first(m), prior);
      measured = std::max(measured, (post.var - previous).maxCoeff());
      previous = post.var;
    }
  }
  for (int trial = 0; trial < 5; ++trial) {
    Model model = make_model(small_config(AggregatorKind::brm, 3, 16), rng());
    const ContextSet context = random_context(rng, 30);
    Vector previous = prior_belief(model).var;
    for (Eigen::Index n = 1; n <= context.size(); ++n) {
      const auto post = infer_posterior(model, context.slice(0, n));
      measured = std::max(measured, (post.var - previous).maxCoeff());
      previous = post.var;
    }
  }
  return {"monotone_contraction", measured <= 0.0, measured, 0.0,
          "largest variance increase when a context point is added"};
}

PropertyResult kl_nonnegative(const Context& ctx) {
  constexpr double kBound = 1e-12;
  Rng rng(derive_seed(ctx.options.seed, {5}));
  double most_negative = 0.0, self = 0.0, tape_gap = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const Eigen::Index d = uniform_int(rng, 1, 8);
    const auto q = random_belief(d, rng);
    const auto p = random_belief(d, rng);
    most_negative = std::min(most_negative, kl_diag(q, p));
    self = std::max(self, std::abs(kl_diag(q, q)));
    if (trial % 100 == 0) {
      Tape tape;
      PriorNodes prior{tape.constant(Matrix(p.mu.transpose())), tape.constant(Matrix(p.var.transpose()))};
      const Var rows = kl_rows(tape.constant(Matrix(q.mu.transpose())), tape.constant(Matrix(q.var.transpose())), prior);
      tape_gap = std::max(tape_gap, std::abs(rows.value()(0, 0) - kl_diag(q, p)));
    }
  }
  const double measured = std::max({-most_negative, self, tape_gap});
  return {"kl_nonnegative", measured <= kBound, measured, kBound,
          fmt::format("min KL {:.3g}, max |KL(q,q)| {:.3g}, tape gap {:.3g}", most_negative, self, tape_gap)};
}

std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             fmt::format("brm_verify_{}_{}_{}", tag, static_cast<long>(::getpid()), counter++);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<TaskInstance> small_pool(std::uint64_t seed) {
  std::vector<TaskInstance> pool;
  for (std::uint64_t i = 0; i < 8; ++i) pool.push_back(sample_task(TaskKind::piecewise_linear, derive_seed(seed, {i})));
  return pool;
}

TrainConfig small_train_config(std::uint64_t seed, std::int64_t steps) {
  TrainConfig c;
  c.seed = seed;
  c.max_steps = steps;
  c.batch_tasks = 4;
  c.max_context = 12;
  c.mc_samples = 2;
  return c;
}

PropertyResult checkpoint_roundtrip(const Context& ctx) {
  const auto pool = small_pool(derive_seed(ctx.options.seed, {6}));
  int mismatches = 0;
  std::string detail = "save/load after Adam steps compares every value, gradient and moment bitwise";
  const auto dir = scratch_dir("ckpt");
  for (AggregatorKind kind : {AggregatorKind::brm, AggregatorKind::np, AggregatorKind::gqn, AggregatorKind::lgm}) {
    ModelConfig config = small_config(kind, 3, 16);
    if (kind == AggregatorKind::brm) {
      config.group_size = 2;
      config.learn_prior = true;
    }
    const TrainConfig tc = small_train_config(derive_seed(ctx.options.seed, {6, 1}), 5);
    TrainState state = train(pool, tc, initial_state(config, tc));
    const auto stem = dir / std::string(to_string(kind));
    save_model(state.model, stem);
    const Model loaded = load_model(stem);
    if (!bitwise_equal(state.model.params, loaded.params) || loaded.config.to_json() != config.to_json()) {
      ++mismatches;
      detail = fmt::format("{} checkpoint differs after reload", to_string(kind));
    }
  }
  std::filesystem::remove_all(dir);
  return {"checkpoint_roundtrip", mismatches == 0, static_cast<double>(mismatches), 0.0, detail};
}

PropertyResult seed_determinism(const Context& ctx) {
  const auto pool = small_pool(derive_seed(ctx.options.seed, {7}));
  const ModelConfig config = small_config(AggregatorKind::brm, 3, 16);
  const TrainConfig tc = small_train_config(derive_seed(ctx.options.seed, {7, 1}), 12);
  int failures = 0;
  std::vector<std::string> notes;

  const TrainState a = train(pool, tc, initial_state(config, tc));
  const TrainState b = train(pool, tc, initial_state(config, tc));
  if (!bitwise_equal(a.model.params, b.model.params)) {
    ++failures;
    notes.push_back("repeat run differs");
  }

  // Split run: stop half-way, checkpoint, reload, finish.
  TrainConfig half = tc;
  half.max_steps = tc.max_steps / 2;
  TrainState first = train(pool, half, initial_state(config, tc));
  const auto dir = scratch_dir("seed");
  save_model(first.model, dir / "half");
  TrainState resumed{load_model(dir / "half"), first.step, first.running_loss};
  resumed = train(pool, tc, std::move(resumed));
  std::filesystem::remove_all(dir);
  if (!bitwise_equal(a.model.params, resumed.model.params)) {
    ++failures;
    notes.push_back("resumed run differs");
  }

  TrainConfig other = tc;
  other.seed += 1;
  if (bitwise_equal(a.model.params, train(pool, other, initial_state(config, other)).model.params)) {
    ++failures;
    notes.push_back("different seeds gave identical parameters");
  }

  const TaskRecord r1{0, sample_task(TaskKind::piecewise_linear, 99), 5, {}};
  const TaskRecord r2{0, sample_task(TaskKind::piecewise_linear, 99), 5, {}};
  if (serialize_task(r1) != serialize_task(r2)) {
    ++failures;
    notes.push_back("task generation differs");
  }

  std::string detail = "repeat, split-resume and generation runs";
  for (const auto& n : notes) detail += "; " + n;
  return {"seed_determinism", failures == 0, static_cast<double>(failures), 0.0, detail};
}

PropertyResult lgm_embedding(const Context& ctx) {
  constexpr double kBound = 1e-9;
  constexpr int kInstances = 500;
  Rng rng(derive_seed(ctx.options.seed, {8}));
  double measured = 0.0;
  for (int i = 0; i < kInstances; ++i) {
    const Eigen::Index d = uniform_int(rng, 1, 4), dy = uniform_int(rng, 1, 2);
    const int n = uniform_int(rng, 1, 32);
    std::vector<LinearGaussianObservation<double>> obs;
    for (int k = 0; k < n; ++k) obs.push_back(random_observation(d, dy, rng));
    // Half of the instances use the standard prior and the library LGM
    // aggregator, the other half a random prior and the closed form above.
    const bool standard = i % 2 == 0;
    const auto prior = standard ? GaussianBelief<double>::standard(d) : random_belief(d, rng);
    const auto expected = standard ? aggregate_lgm<double>(obs, d) : conjugate_update(obs, prior);
    std::vector<NaturalIncrement<double>> incs;
    for (const auto& o : obs) incs.push_back(lgm_realization(o, prior));
    measured = std::max(measured, max_abs_diff(ctx.aggregate(incs, prior), expected));
  }
  return {"lgm_embedding", measured <= kBound, measured, kBound,
          fmt::format("{} instances, N <= 32, d <= 4, dy <= 2", kInstances)};
}

PropertyResult batch_grouping(const Context& ctx) {
  constexpr double kBound = 1e-9;
  Rng rng(derive_seed(ctx.options.seed, {9}));
  double measured = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Eigen::Index d = uniform_int(rng, 1, 3), dy = uniform_int(rng, 1, 2);
    const int n = 2 * uniform_int(rng, 1, 16);
    const auto prior = random_belief(d, rng);
    std::vector<LinearGaussianObservation<double>> obs;
    for (int k = 0; k < n; ++k) obs.push_back(random_observation(d, dy, rng));
    std::vector<NaturalIncrement<double>> single, pairs;
    for (const auto& o : obs) single.push_back(lgm_realization(o, prior));
    for (int k = 0; k < n; k += 2) pairs.push_back(lgm_group_realization(std::span(obs).subspan(k, 2), prior));
    measured = std::max(measured, max_abs_diff(ctx.aggregate(single, prior), ctx.aggregate(pairs, prior)));
  }
  return {"batch_grouping", measured <= kBound, measured, kBound, "L = 1 vs L = 2 exact group increments"};
}

PropertyResult grid_oracle(const Context& ctx) {
  constexpr double kBound = 1e-6;
  Rng rng(derive_seed(ctx.options.seed, {10}));
  double measured = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int n = uniform_int(rng, 0, 8);
    const auto prior = GaussianBelief<double>::standard(1);
    ContextSet context;
    context.x.resize(n, 1);
    context.y.resize(n, 1);
    std::vector<NaturalIncrement<double>> incs;
    const double w = std::normal_distribution<double>(0.0, 1.0)(rng);
    const double b = std::normal_distribution<double>(0.0, 1.0)(rng);
    const double g = log_uniform(rng, 0.1, 1.0);
    // Data drawn from the model itself, h ~ N(0, 1).
    const double h = std::normal_distribution<double>(0.0, 1.0)(rng);
    for (int k = 0; k < n; ++k) {
      LinearGaussianObservation<double> o;
      o.W = Eigen::MatrixXd::Constant(1, 1, w);
      o.b = Vector::Constant(1, b);
      o.noise_var = Vector::Constant(1, g);
      o.y = Vector::Constant(1, w * h + b + std::sqrt(g) * std::normal_distribution<double>(0.0, 1.0)(rng));
      context.x(k, 0) = 0.0;
      context.y(k, 0) = o.y[0];
      incs.push_back(lgm_realization(o, prior));
    }
    const auto post = ctx.aggregate(incs, prior);
    const PointLogLikelihood loglik = [&](double h, double, double y) {
      const double r = y - (w * h + b);
      return -0.5 * (std::log(2.0 * std::numbers::pi * g) + r * r / g);
    };
    const GridPosterior grid = grid_posterior(loglik, context, prior);
    measured = std::max({measured, std::abs(grid.mean() - post.mu[0]), std::abs(grid.variance() - post.var[0])});
  }
  return {"grid_oracle", measured <= kBound, measured, kBound, "brm of exact increments vs grid moments, N <= 8"};
}

PropertyResult theorem1(const Context& ctx) {
  const std::vector<int> n_list = {8, 32, 128, 512};
  const auto rows =
      bayes_risk_curve(ObservationModel::gaussian_mean(1, 1.0), n_list, 100000, derive_seed(ctx.options.seed, {11}),
                       ctx.options.threads);
  bool ok = true;
  double worst = 0.0;
  std::string detail = "ratio";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const double dev = std::abs(rows[k].ratio - 1.0);
    detail += fmt::format(" N={}:{:.4f}", rows[k].n, rows[k].ratio);
    if (rows[k].n >= 32) {
      worst = std::max(worst, dev);
      ok = ok && rows[k].ratio >= 0.85 && rows[k].ratio <= 1.15;
    }
    if (k > 0 && dev > std::abs(rows[k - 1].ratio - 1.0)) {
      ok = false;
      detail += "(not monotone)";
    }
  }
  return {"theorem1", ok, worst, 0.15, detail};
}

PropertyResult variance_decay(const Context& ctx) {
  std::vector<int> n_list;
  for (int n = 8; n <= 1024; n *= 2) n_list.push_back(n);
  TaskHyperprior hyper;
  std::vector<TaskInstance> tasks;
  for (std::uint64_t i = 0; i < 20; ++i) {
    tasks.push_back(sample_task(TaskKind::conjugate_oracle, derive_seed(ctx.options.seed, {12, i}), hyper));
  }
  EvalOptions eval;
  eval.seed = derive_seed(ctx.options.seed, {12});
  eval.threads = ctx.options.threads;
  eval.queries_per_task = 1;

  // Exact conjugate encoder: each point is a linear-Gaussian observation of h.
  Model exact = make_model(small_config(AggregatorKind::brm, 1, 8), 1);
  const double noise_var = hyper.conjugate_noise_std * hyper.conjugate_noise_std;
  const auto prior = prior_belief(exact);
  eval.increments = [&](const ContextSet& c) {
    std::vector<NaturalIncrement<double>> out;
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      LinearGaussianObservation<double> o;
      o.W = Eigen::MatrixXd::Ones(1, 1);
      o.b = Vector::Zero(1);
      o.noise_var = Vector::Constant(1, noise_var);
      o.y = Vector::Constant(1, c.y(i, 0));
      out.push_back(lgm_realization(o, prior));
    }
    return out;
  };
  const double brm_slope = variance_curve(exact, tasks, n_list, eval).slope;
  eval.increments = {};

  Rng rng(derive_seed(ctx.options.seed, {12, 99}));
  const double np_slope = variance_curve(make_model(small_config(AggregatorKind::np, 4, 32), rng()), tasks, n_list, eval).slope;
  const double gqn_slope =
      variance_curve(make_model(small_config(AggregatorKind::gqn, 4, 32), rng()), tasks, n_list, eval).slope;

  const double dev = std::max({std::abs(brm_slope + 1.0), std::abs(gqn_slope - 1.0), std::abs(np_slope)});
  const bool ok = std::abs(brm_slope + 1.0) <= 0.1 && std::abs(np_slope) < 0.1 && std::abs(gqn_slope - 1.0) <= 0.1;
  return {"variance_decay", ok, dev, 0.1,
          fmt::format("slopes brm {:.4f} (target -1), np {:.4f} (0), gqn {:.4f} (+1)", brm_slope, np_slope, gqn_slope)};
}

PropertyResult bvm(const Context& ctx) {
  BvmOptions options;
  options.seed = derive_seed(ctx.options.seed, {13});
  options.threads = ctx.options.threads;
  const std::vector<int> n_list = {16, 64, 256};
  const auto rows = bvm_check(ObservationModel::tanh_link(0.25), 0.5, n_list, 500, options);
  bool ok = rows[0].tv.mean > rows[1].tv.mean && rows[1].tv.mean > rows[2].tv.mean && rows[2].tv.mean < 0.05;

  // Exactly Gaussian case: flat prior, Gaussian-mean likelihood.
  BvmOptions flat = options;
  flat.prior.reset();
  double conjugate_tv = 0.0;
  for (const auto& r : bvm_check(ObservationModel::gaussian_mean(1, 1.0), 0.5, std::vector<int>{4, 32, 256}, 20, flat)) {
    conjugate_tv = std::max(conjugate_tv, r.max_tv);
  }
  ok = ok && conjugate_tv <= 1e-4;
  return {"bvm", ok, rows[2].tv.mean, 0.05,
          fmt::format("tanh-link mean TV N=16:{:.4f} N=64:{:.4f} N=256:{:.4f}; conjugate max TV {:.2g}",
                      rows[0].tv.mean, rows[1].tv.mean, rows[2].tv.mean, conjugate_tv)};
}

using PropertyFn = PropertyResult (*)(const Context&);

const std::vector<std::pair<std::string, PropertyFn>>& registry() {
  static const std::vector<std::pair<std::string, PropertyFn>> props = {
      {"gradient_check", gradient_check},
      {"permutation_invariance", permutation_invariance},
      {"prior_recovery", prior_recovery},
      {"monotone_contraction", monotone_contraction},
      {"kl_nonnegative", kl_nonnegative},
      {"checkpoint_roundtrip", checkpoint_roundtrip},
      {"seed_determinism", seed_determinism},
      {"lgm_embedding", lgm_embedding},
      {"batch_grouping", batch_grouping},
      {"grid_oracle", grid_oracle},
      {"theorem1", theorem1},
      {"variance_decay", variance_decay},
      {"bvm", bvm},
  };
  return props;
}

PropertyResult run_one(const std::string& name, PropertyFn fn, const VerifyOptions& options) {
  Context ctx{options, options.aggregate};
  if (!ctx.aggregate) {
    ctx.aggregate = [](std::span<const NaturalIncrement<double>> incs, const GaussianBelief<double>& prior) {
      return aggregate_brm<double>(incs, prior);
    };
  }
  const auto start = Clock::now();
  PropertyResult result;
  try {
    result = fn(ctx);
  } catch (const std::exception& e) {
    result = {name, false, std::numeric_limits<double>::quiet_NaN(), 0.0, std::string("exception: ") + e.what()};
  }
  result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  if (options.on_result) options.on_result(result);
  return result;
}

}  // namespace

std::vector<std::string> property_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<PropertyResult> run_verification(const VerifyOptions& options) {
  std::vector<PropertyResult> results;
  for (const auto& [name, fn] : registry()) {
    if (!options.filter.empty() && name.find(options.filter) == std::string::npos) continue;
    results.push_back(run_one(name, fn, options));
  }
  return results;
}

PropertyResult run_property(const std::string& name, const VerifyOptions& options) {
  for (const auto& [n, fn] : registry()) {
    if (n == name) return run_one(n, fn, options);
  }
  throw DomainError("unknown property '" + name + "'");
}

}  // namespace brm

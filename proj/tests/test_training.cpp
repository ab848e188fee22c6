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

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "brm/errors.hpp"
#include "brm/training.hpp"

namespace brm {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "brm_test_training" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// lgm model whose heads are constant: y = w h + b + N(0, g).
Model fixed_lgm(double w, double b, double g, int hidden = 4) {
  ModelConfig c;
  c.aggregator = AggregatorKind::lgm;
  c.latent_dim = 1;
  c.hidden = hidden;
  Model m = make_model(c, 1);
  Layer& out = m.params.layer("lgm.out");
  out.weight.value.matrix().setZero();
  out.bias.value.matrix() << w, b, softplus_inverse(g - kVarianceFloor);
  return m;
}

ContextSet column_context(std::initializer_list<double> ys) {
  ContextSet c;
  c.x = Matrix::Zero(static_cast<Eigen::Index>(ys.size()), 1);
  c.y.resize(static_cast<Eigen::Index>(ys.size()), 1);
  Eigen::Index i = 0;
  for (double y : ys) c.y(i++, 0) = y;
  return c;
}

std::vector<TaskInstance> pool_of(TaskKind kind, int count, std::uint64_t seed) {
  std::vector<TaskInstance> pool;
  for (int i = 0; i < count; ++i) pool.push_back(sample_task(kind, derive_seed(seed, {static_cast<std::uint64_t>(i)})));
  return pool;
}

ModelConfig small_model(AggregatorKind kind, int d = 2, int hidden = 16) {
  ModelConfig c;
  c.aggregator = kind;
  c.latent_dim = d;
  c.hidden = hidden;
  return c;
}

TrainConfig small_train(std::int64_t steps) {
  TrainConfig t;
  t.batch_tasks = 4;
  t.max_steps = steps;
  t.max_context = 12;
  t.seed = 11;
  return t;
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig t = small_train(7);
  t.target_split = true;
  EXPECT_EQ(TrainConfig::from_json(t.to_json()).to_json(), t.to_json());
  TrainConfig bad = t;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), DomainError);
  bad = t;
  bad.min_context = 20;
  EXPECT_THROW(bad.validate(), DomainError);
  nlohmann::json j = t.to_json();
  j.erase("lr");
  EXPECT_ANY_THROW(TrainConfig::from_json(j));
}

TEST(Elbo, PosteriorEqualToPriorHasZeroKl) {
  Model m = make_model(small_model(AggregatorKind::brm, 3), 2);
  Layer& out = m.params.layer("enc.out");
  out.weight.value.matrix().setZero();
  out.bias.value.matrix().leftCols(3).setZero();
  out.bias.value.matrix().rightCols(3).setConstant(-800.0);  // softplus underflows to exactly 0
  const ContextSet ctx = sample_context(sample_task(TaskKind::linear, 3), 9, 4);
  Rng rng(5);
  const ElboValue v = elbo(m, ctx, 3, rng);
  EXPECT_EQ(v.kl, 0.0);
  EXPECT_DOUBLE_EQ(v.loss, -v.recon);
  const auto post = infer_posterior(m, ctx);
  EXPECT_TRUE(post.mu.isZero(0.0));
  EXPECT_TRUE(post.var.isOnes(0.0));
}

TEST(Elbo, FixedStandardDecoderGivesClosedFormReconstruction) {
  const Model m = fixed_lgm(0.0, 0.0, 1.0);
  const ContextSet ctx = column_context({0.0});
  for (int s : {1, 5}) {
    Rng rng(6);
    const ElboValue v = elbo(m, ctx, s, rng);
    EXPECT_NEAR(v.recon, -0.5 * std::log(2.0 * std::numbers::pi), 1e-12);
    EXPECT_NEAR(v.recon, -0.918939, 1e-6);
    EXPECT_EQ(v.kl, 0.0);
  }
}

TEST(Elbo, EmptyContextOrNoSamplesIsAnError) {
  const Model m = make_model(small_model(AggregatorKind::brm), 1);
  Rng rng(1);
  EXPECT_THROW(elbo(m, ContextSet{0, Matrix(0, 1), Matrix(0, 1)}, 1, rng), DomainError);
  EXPECT_THROW(elbo(m, column_context({1.0}), 0, rng), DomainError);
}

TEST(Elbo, ExactPosteriorGivesLogMarginalLikelihood) {
  // y_n = h + e_n, h ~ N(0, 1), e ~ N(0, 1): y ~ N(0, I + 11^T).
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  for (std::uint64_t inst = 0; inst < 3; ++inst) {
    const TaskInstance task = sample_task(TaskKind::conjugate_oracle, 40 + inst);
    const ContextSet ctx = sample_context(task, 3 + 4 * static_cast<Eigen::Index>(inst), 50 + inst);
    const double n = static_cast<double>(ctx.size());
    const double sy = ctx.y.sum(), syy = ctx.y.squaredNorm();
    const double log_marginal =
        -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * std::log1p(n) - 0.5 * (syy - sy * sy / (1.0 + n));
    constexpr int kSamples = 10000;
    Rng rng(60 + inst);
    double sum = 0.0, sum_sq = 0.0;
    for (int s = 0; s < kSamples; ++s) {
      const double e = -elbo(m, ctx, 1, rng).loss;
      sum += e;
      sum_sq += e * e;
    }
    const double mean = sum / kSamples;
    const double se = std::sqrt((sum_sq / kSamples - mean * mean) / (kSamples - 1));
    EXPECT_LE(std::abs(mean - log_marginal), 3.0 * se) << "instance " << inst << " se " << se;
  }
}

/// Gradient of the batch ELBO by the tape, compared with central differences
/// using the same reparameterization noise.
void check_gradient(AggregatorKind kind, int group) {
  ModelConfig c = small_model(kind, 2, 5);
  c.group_size = kind == AggregatorKind::brm ? group : 1;
  c.learn_prior = kind == AggregatorKind::brm || kind == AggregatorKind::np;
  Model m = make_model(c, 70 + static_cast<std::uint64_t>(kind));
  const ContextSet ctx = sample_context(sample_task(TaskKind::piecewise_linear, 71), 6, 72);
  constexpr std::uint64_t kNoise = 73;
  constexpr int kS = 2;

  m.params.zero_grad();
  {
    Tape tape;
    BoundParams params = bind(tape, m.params);
    const ContextSet contexts[] = {ctx};
    const Batch post = Batch::build(contexts, c.group_size, false);
    const Batch lik = Batch::build(contexts, 1, true);
    Rng rng(kNoise);
    ElboNodes nodes = elbo(tape, params, c, post, lik, kS, rng);
    tape.backward(nodes.loss);
  }
  auto value = [&] {
    Rng rng(kNoise);
    return elbo(m, ctx, kS, rng).loss;
  };
  int checked = 0;
  for (auto& [name, layer] : m.params.layers()) {
    for (Param* p : {&layer.weight, &layer.bias}) {
      auto data = p->value.data();
      const auto grad = p->grad.data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        const double h = 1e-5 * std::max(1.0, std::abs(orig));
        data[i] = orig + h;
        const double up = value();
        data[i] = orig - h;
        const double down = value();
        data[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        EXPECT_LE(std::abs(fd - grad[i]) / scale, 1e-3) << to_string(kind) << ' ' << name << '[' << i << ']';
        ++checked;
      }
    }
  }
  EXPECT_EQ(static_cast<std::size_t>(checked), m.params.parameter_count());
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  check_gradient(AggregatorKind::brm, 1);
  check_gradient(AggregatorKind::brm, 2);
  check_gradient(AggregatorKind::np, 1);
  check_gradient(AggregatorKind::gqn, 1);
  check_gradient(AggregatorKind::lgm, 1);
}

TEST(Elbo, MeanAndVarianceBothReceiveGradient) {
  Model m = make_model(small_model(AggregatorKind::brm, 3), 80);
  const ContextSet ctx = sample_context(sample_task(TaskKind::linear, 81), 10, 82);
  m.params.zero_grad();
  Tape tape;
  BoundParams params = bind(tape, m.params);
  const ContextSet contexts[] = {ctx};
  const Batch b = Batch::build(contexts, 1, true);
  Rng rng(83);
  ElboNodes nodes = elbo(tape, params, m.config, b, b, 1, rng);
  tape.backward(nodes.loss);
  const Matrix& g = m.params.layer("enc.out").bias.grad.matrix();
  EXPECT_GT(g.leftCols(3).cwiseAbs().minCoeff(), 0.0);   // location f
  EXPECT_GT(g.rightCols(3).cwiseAbs().minCoeff(), 0.0);  // precision increment
}

TEST(Train, LossDropsOnLinearTasks) {
  const auto pool = pool_of(TaskKind::linear, 64, 90);
  // A fixed context size keeps the summed per-task loss comparable across steps.
  TrainConfig t;
  t.batch_tasks = 16;
  t.max_steps = 500;
  t.min_context = 10;
  t.max_context = 10;
  t.log_every = 1;
  t.seed = 91;
  std::stringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  train(pool, t, initial_state(ModelConfig{}, t), hooks);

  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,loss,recon,kl,wall_ms");
  std::vector<double> losses;
  while (std::getline(log, line)) losses.push_back(std::stod(line.substr(line.find(',') + 1)));
  ASSERT_EQ(losses.size(), 500u);
  auto window = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t i = end - 10; i < end; ++i) s += losses[i];
    return s / 10.0;
  };
  const double start = window(10), finish = window(500);
  ASSERT_GT(start, 0.0);
  EXPECT_LE(finish, 0.8 * start) << "start " << start << " finish " << finish;
}

TEST(Train, ZeroStepsReturnsInitialParameters) {
  const auto pool = pool_of(TaskKind::linear, 4, 100);
  const TrainConfig t = small_train(0);
  const TrainState init = initial_state(small_model(AggregatorKind::np), t);
  const TrainState out = train(pool, t, init);
  EXPECT_EQ(out.step, 0);
  EXPECT_TRUE(bitwise_equal(out.model.params, init.model.params));
}

TEST(Train, IdenticalSeedsGiveIdenticalParameters) {
  const auto pool = pool_of(TaskKind::piecewise_linear, 8, 110);
  const TrainConfig t = small_train(25);
  const ModelConfig mc = small_model(AggregatorKind::brm);
  const TrainState a = train(pool, t, initial_state(mc, t));
  const TrainState b = train(pool, t, initial_state(mc, t));
  EXPECT_TRUE(bitwise_equal(a.model.params, b.model.params));
  EXPECT_EQ(a.running_loss, b.running_loss);
  TrainConfig other = t;
  other.seed = 12;
  EXPECT_FALSE(bitwise_equal(a.model.params, train(pool, other, initial_state(mc, other)).model.params));
}

TEST(Train, ResumeFromCheckpointIsBitwise) {
  const auto pool = pool_of(TaskKind::piecewise_linear, 8, 120);
  TrainConfig full = small_train(30);
  const ModelConfig mc = small_model(AggregatorKind::brm, 2, 12);
  const TrainState straight = train(pool, full, initial_state(mc, full));

  TrainConfig half = full;
  half.max_steps = 15;
  const TrainState mid = train(pool, half, initial_state(mc, half));
  const auto dir = scratch("resume");
  save_model(mid.model, dir / "ck");
  TrainState resumed{load_model(dir / "ck"), mid.step, mid.running_loss};
  resumed = train(pool, full, resumed);
  EXPECT_TRUE(bitwise_equal(straight.model.params, resumed.model.params));
  EXPECT_EQ(straight.running_loss, resumed.running_loss);
}

TEST(Train, CheckpointHookRunsPeriodicallyAndAtExit) {
  const auto pool = pool_of(TaskKind::linear, 4, 125);
  TrainConfig t = small_train(10);
  t.checkpoint_every = 4;
  std::vector<std::int64_t> steps;
  TrainHooks hooks;
  hooks.checkpoint = [&](const TrainState& s) { steps.push_back(s.step); };
  train(pool, t, initial_state(small_model(AggregatorKind::gqn), t), hooks);
  EXPECT_EQ(steps, (std::vector<std::int64_t>{4, 8, 10}));
}

TEST(Train, NonFiniteLossAbortsWithBatchDump) {
  const auto pool = pool_of(TaskKind::linear, 4, 130);
  const TrainConfig t = small_train(5);
  TrainState s = initial_state(small_model(AggregatorKind::brm), t);
  s.model.params.layer("enc.out").bias.value.matrix()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainHooks hooks;
  hooks.dump_dir = scratch("nan");
  try {
    train(pool, t, s, hooks);
    FAIL() << "expected NumericalAbort";
  } catch (const NumericalAbort& e) {
    ASSERT_TRUE(fs::exists(e.dump_path()));
    const auto dumped = load_tasks(e.dump_path());
    const auto expected = draw_training_contexts(pool, t, 0);
    ASSERT_EQ(dumped.size(), expected.size());
    for (std::size_t i = 0; i < dumped.size(); ++i) EXPECT_EQ(dumped[i].context.y, expected[i].y);
  }
}

TEST(Train, EmptyPoolIsAnError) {
  const TrainConfig t = small_train(1);
  EXPECT_THROW(train({}, t, initial_state(small_model(AggregatorKind::brm), t)), DomainError);
}

TEST(Infer, EmptyContextFallsBackToPrior) {
  const Model m = make_model(small_model(AggregatorKind::brm, 3), 140);
  const ContextSet empty{0, Matrix(0, 1), Matrix(0, 1)};
  const Vector q = Vector::Constant(1, 0.25);
  const Inference inf = infer(m, empty, q);
  EXPECT_TRUE(inf.posterior.mu.isZero(0.0));
  EXPECT_TRUE(inf.posterior.var.isOnes(0.0));
  const Predictive at_zero = decode(m, q, Vector::Zero(3));
  EXPECT_EQ(inf.mean, at_zero.mean);
  EXPECT_EQ(inf.var, at_zero.var);
  EXPECT_EQ(inf.point, at_zero.mean[0]);
}

TEST(Infer, DeterministicModeRepeats) {
  const Model m = make_model(small_model(AggregatorKind::np, 3), 150);
  const ContextSet ctx = sample_context(sample_task(TaskKind::piecewise_linear, 151), 17, 152);
  const Vector q = Vector::Constant(1, -0.4);
  const Inference a = infer(m, ctx, q), b = infer(m, ctx, q);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.var, b.var);
  EXPECT_EQ(a.h, a.posterior.mu);
  InferOptions sampled;
  sampled.deterministic = false;
  sampled.seed = 9;
  const Inference c = infer(m, ctx, q, sampled), d = infer(m, ctx, q, sampled);
  EXPECT_EQ(c.h, d.h);
  EXPECT_NE(c.h, a.h);
}

TEST(Infer, QueryDimensionMismatchIsAnError) {
  const Model m = make_model(small_model(AggregatorKind::brm), 160);
  EXPECT_THROW(infer(m, column_context({1.0}), Vector::Zero(2)), ShapeError);
  ContextSet wide{0, Matrix::Zero(1, 2), Matrix::Zero(1, 1)};
  EXPECT_THROW(infer(m, wide, Vector::Zero(1)), ShapeError);
}

TEST(Infer, RealizationEncoderGivesBayesPredictiveMean) {
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  InferOptions opts;
  opts.increments = [&](const ContextSet& c) {
    std::vector<NaturalIncrement<double>> incs;
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      incs.push_back(lgm_realization(lgm_heads(m, c.x.row(i).transpose(), c.y.row(i).transpose()),
                                     GaussianBelief<double>::standard(1)));
    }
    return incs;
  };
  for (std::uint64_t t = 0; t < 50; ++t) {
    const ContextSet ctx = sample_context(sample_task(TaskKind::conjugate_oracle, 170 + t), 1 + 3 * static_cast<Eigen::Index>(t), t);
    const double n = static_cast<double>(ctx.size());
    const double analytic = ctx.y.sum() / (n + 1.0);
    const Inference inf = infer(m, ctx, Vector::Constant(1, 0.3), opts);
    EXPECT_NEAR(inf.point, analytic, 1e-6);
    EXPECT_NEAR(inf.posterior.var[0], 1.0 / (n + 1.0), 1e-12);
    // The predictive variance adds the noise to the posterior variance.
    EXPECT_NEAR(inf.var[0], 1.0, 1e-12);
  }
}

TEST(TrainSlow, ConjugateOraclePosteriorRecovery) {
  const auto pool = pool_of(TaskKind::conjugate_oracle, 1000, 200);
  TrainConfig t;
  t.max_steps = 20000;
  t.batch_tasks = 16;
  t.seed = 201;
  const TrainState s = train(pool, t, initial_state(small_model(AggregatorKind::brm, 1, 64), t));

  constexpr int kTasks = 200;
  constexpr Eigen::Index kN = 16;
  std::vector<double> learned_mu, analytic_mu, learned_var, analytic_var;
  for (int i = 0; i < kTasks; ++i) {
    const auto seed = derive_seed(202, {static_cast<std::uint64_t>(i)});
    const ContextSet ctx = sample_context(sample_task(TaskKind::conjugate_oracle, seed), kN, seed + 1);
    const auto post = infer_posterior(s.model, ctx);
    learned_mu.push_back(post.mu[0]);
    learned_var.push_back(post.var[0]);
    analytic_mu.push_back(ctx.y.sum() / (kN + 1.0));
    analytic_var.push_back(1.0 / (kN + 1.0));
  }
  // The latent is identified only up to sign.
  double dot = 0.0;
  for (int i = 0; i < kTasks; ++i) dot += learned_mu[i] * analytic_mu[i];
  const double sign = dot < 0.0 ? -1.0 : 1.0;
  double mae = 0.0, rel = 0.0;
  for (int i = 0; i < kTasks; ++i) {
    mae += std::abs(sign * learned_mu[i] - analytic_mu[i]) / kTasks;
    rel += std::abs(learned_var[i] - analytic_var[i]) / analytic_var[i] / kTasks;
  }
  RecordProperty("mu_mae", std::to_string(mae));
  RecordProperty("var_rel_err", std::to_string(rel));
  EXPECT_LT(mae, 0.1);
  EXPECT_LT(rel, 0.3);
}

}  // namespace
}  // namespace brm

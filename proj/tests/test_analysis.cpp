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

#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "brm/analysis.hpp"
#include "brm/errors.hpp"

namespace brm {
namespace {

constexpr double kLogRootTwoPi = 0.91893853320467274178;

Model fixed_lgm(double w, double b, double g) {
  ModelConfig c;
  c.aggregator = AggregatorKind::lgm;
  c.latent_dim = 1;
  c.hidden = 4;
  Model m = make_model(c, 1);
  Layer& out = m.params.layer("lgm.out");
  out.weight.value.matrix().setZero();
  out.bias.value.matrix() << w, b, softplus_inverse(g - kVarianceFloor);
  return m;
}

/// Exact conjugate encoder for the unit-noise Gaussian-mean model.
IncrementSource realization_encoder() {
  return [](const ContextSet& c) {
    std::vector<NaturalIncrement<double>> incs;
    const auto prior = GaussianBelief<double>::standard(1);
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      LinearGaussianObservation<double> obs{Eigen::MatrixXd::Ones(1, 1), Vector::Zero(1), Vector::Ones(1),
                                            c.y.row(i).transpose()};
      incs.push_back(lgm_realization(obs, prior));
    }
    return incs;
  };
}

/// GQN model with a constant per-point embedding and a decoder close to the
/// identity for small latents.
Model constant_gqn(double embedding) {
  ModelConfig c;
  c.aggregator = AggregatorKind::gqn;
  c.latent_dim = 1;
  c.hidden = 4;
  Model m = make_model(c, 2);
  for (auto& [name, layer] : m.params.layers()) {
    layer.weight.value.matrix().setZero();
    layer.bias.value.matrix().setZero();
  }
  m.params.layer("enc.out").bias.value.matrix()(0, 0) = embedding;
  m.params.layer("dec.in").weight.value.matrix()(1, 0) = 0.1;  // row 0 is x, row 1 is h
  m.params.layer("dec.hidden").weight.value.matrix()(0, 0) = 1.0;
  m.params.layer("dec.out").weight.value.matrix()(0, 0) = 10.0;
  return m;
}

std::vector<TaskInstance> conjugate_tasks(int count, std::uint64_t seed) {
  std::vector<TaskInstance> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(sample_task(TaskKind::conjugate_oracle, derive_seed(seed, {static_cast<std::uint64_t>(i)})));
  }
  return out;
}

TaskInstance constant_task(double value) {
  TaskHyperprior hyper;
  hyper.linear_noise_std = 0.0;
  TaskInstance t = sample_task(TaskKind::linear, 1, hyper);
  t.h_star << 0.0, value;
  return t;
}

TEST(Plumbing, ParallelForVisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 2, [](std::size_t i) {
                 if (i == 7) throw DomainError("boom");
               }),
               DomainError);
}

TEST(Plumbing, MeanStdUsesSampleDeviation) {
  const double v[] = {1.0, 2.0, 3.0, 4.0};
  const MeanStd m = MeanStd::of(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(m.count, 4);
}

TEST(Plumbing, LogLogSlopeOfPowerLaw) {
  const double n[] = {8, 16, 32, 64, 128};
  double v[5];
  for (int i = 0; i < 5; ++i) v[i] = 3.0 * std::pow(n[i], -0.7);
  EXPECT_NEAR(fit_loglog_slope(n, v), -0.7, 1e-12);
  EXPECT_THROW(fit_loglog_slope(std::span(n, 3), std::span(v, 3)), DomainError);
  const double unsorted[] = {8, 32, 16, 64, 128};
  EXPECT_THROW(fit_loglog_slope(unsorted, v), DomainError);
}

TEST(PredictiveLl, StandardDecoderAtZeroTarget) {
  const Model m = fixed_lgm(0.0, 0.0, 1.0);
  const std::vector<TaskInstance> tasks(5, constant_task(0.0));
  for (int s : {2, 7, 64}) {
    EvalOptions opts;
    opts.mc_samples = s;
    opts.queries_per_task = 9;
    const MeanStd ll = predictive_ll(m, tasks, 4, opts);
    EXPECT_NEAR(ll.mean, -kLogRootTwoPi, 1e-12);
    EXPECT_NEAR(ll.mean, -0.918939, 1e-6);
    EXPECT_NEAR(ll.std, 0.0, 1e-12);
    EXPECT_EQ(ll.count, 5);
  }
}

TEST(PredictiveLl, LogSumExpSurvivesTinyDensities) {
  // log N(4.5; 0, 0.01) is about -1011; exp() of it underflows.
  const double g = 0.01, y = 4.5;
  const Model m = fixed_lgm(0.0, 0.0, g);
  const std::vector<TaskInstance> tasks(2, constant_task(y));
  EvalOptions opts;
  opts.mc_samples = 16;
  const double expected = -0.5 * std::log(2.0 * std::numbers::pi * g) - y * y / (2.0 * g);
  ASSERT_LT(expected, -745.0);
  const MeanStd ll = predictive_ll(m, tasks, 3, opts);
  EXPECT_TRUE(std::isfinite(ll.mean));
  EXPECT_NEAR(ll.mean, expected, 1e-9 * std::abs(expected));
}

TEST(PredictiveLl, NeedsTwoSamples) {
  const Model m = fixed_lgm(0.0, 0.0, 1.0);
  const std::vector<TaskInstance> tasks(1, constant_task(0.0));
  EvalOptions opts;
  opts.mc_samples = 1;
  EXPECT_THROW(predictive_ll(m, tasks, 2, opts), DomainError);
}

TEST(PredictiveLl, ReproducibleAndThreadIndependent) {
  const Model m = make_model(ModelConfig{}, 3);
  std::vector<TaskInstance> tasks;
  for (std::uint64_t i = 0; i < 6; ++i) tasks.push_back(sample_task(TaskKind::piecewise_linear, i));
  EvalOptions a;
  a.mc_samples = 8;
  a.threads = 1;
  EvalOptions b = a;
  b.threads = 3;
  const MeanStd x = predictive_ll(m, tasks, 8, a), y = predictive_ll(m, tasks, 8, b);
  EXPECT_EQ(x.mean, y.mean);
  EXPECT_EQ(x.std, y.std);
}

TEST(MseCurve, ExactPosteriorContracts) {
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  const auto tasks = conjugate_tasks(400, 10);
  EvalOptions opts;
  opts.increments = realization_encoder();
  const int n_list[] = {1, 4, 16, 64, 256};
  const auto curve = mse_curve(m, tasks, n_list, opts);
  ASSERT_EQ(curve.size(), 5u);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].value.mean, 1.05 * curve[i - 1].value.mean);
  // E (mu_N - h)^2 = 1 / (N + 1) for the exact posterior mean.
  for (const auto& p : curve) {
    const double expected = 1.0 / (p.n + 1.0);
    const double se = expected * std::sqrt(2.0 / 400.0);
    EXPECT_NEAR(p.value.mean, expected, 4.0 * se) << "N=" << p.n;
  }
  EXPECT_LT(curve.back().value.mean, 0.01);
}

TEST(MseCurve, SumPoolingDiverges) {
  const Model m = constant_gqn(0.05);
  const auto tasks = conjugate_tasks(200, 11);
  const int n_list[] = {8, 256};
  const auto curve = mse_curve(m, tasks, n_list, {});
  EXPECT_GT(curve[1].value.mean, curve[0].value.mean);
}

TEST(VarianceCurve, ExactPosteriorDecaysAsOneOverN) {
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  const auto tasks = conjugate_tasks(10, 12);
  EvalOptions opts;
  opts.increments = realization_encoder();
  const int n_list[] = {8, 16, 32, 64, 128, 256, 512, 1024};
  const VarianceCurve vc = variance_curve(m, tasks, n_list, opts);
  for (const auto& p : vc.points) EXPECT_NEAR(p.value.mean, 1.0 / (p.n + 1.0), 1e-12);
  std::vector<double> n, v;
  for (const auto& p : vc.points) {
    n.push_back(p.n);
    v.push_back(1.0 / (p.n + 1.0));
  }
  // The prior keeps the exact slope slightly above -1 over this range.
  EXPECT_NEAR(vc.slope, fit_loglog_slope(n, v), 1e-9);
  EXPECT_NEAR(vc.slope, -1.0, 0.1);
}

TEST(VarianceCurve, ConstantIncrementsGiveInverseRate) {
  // trace = 1 / (1 + N delta); with N delta >> 1 the slope is close to -1.
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  const auto tasks = conjugate_tasks(3, 16);
  EvalOptions opts;
  opts.increments = [](const ContextSet& c) {
    return std::vector<NaturalIncrement<double>>(static_cast<std::size_t>(c.size()),
                                                 {Vector::Constant(1, 0.3), Vector::Constant(1, 50.0)});
  };
  const int n_list[] = {8, 16, 32, 64, 128, 256, 512, 1024};
  const VarianceCurve vc = variance_curve(m, tasks, n_list, opts);
  for (const auto& p : vc.points) EXPECT_NEAR(p.value.mean, 1.0 / (1.0 + 50.0 * p.n), 1e-15);
  EXPECT_NEAR(vc.slope, -1.0, 0.02);
}

TEST(VarianceCurve, SumPoolingNormGrowsLinearly) {
  const auto tasks = conjugate_tasks(5, 13);
  const int n_list[] = {8, 16, 32, 64};
  const VarianceCurve vc = variance_curve(constant_gqn(0.3), tasks, n_list, {});
  EXPECT_NEAR(vc.points[0].value.mean, 8 * 0.3, 1e-12);
  EXPECT_NEAR(vc.slope, 1.0, 1e-9);
}

TEST(VarianceCurve, NeedsFourIncreasingSizes) {
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  const auto tasks = conjugate_tasks(2, 14);
  const int three[] = {8, 16, 32};
  EXPECT_THROW(variance_curve(m, tasks, three, {}), DomainError);
  const int repeated[] = {8, 16, 16, 32};
  EXPECT_THROW(variance_curve(m, tasks, repeated, {}), DomainError);
}

TEST(Report, CsvAndJsonCarryCountsAndDeviations) {
  const Model m = fixed_lgm(1.0, 0.0, 1.0);
  const auto tasks = conjugate_tasks(6, 15);
  EvalOptions opts;
  opts.mc_samples = 4;
  opts.queries_per_task = 5;
  const int n_list[] = {2, 8};
  const EvalReport r = evaluate(m, "lgm", tasks, n_list, opts);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].tasks, 6);
  EXPECT_GT(r.rows[0].log_likelihood.std, 0.0);
  std::ostringstream csv;
  r.write_csv(csv);
  std::istringstream lines(csv.str());
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "method,n,tasks,ll_mean,ll_std,mse_mean,mse_std,spread_mean,spread_std");
  std::getline(lines, line);
  EXPECT_EQ(line.rfind("lgm,2,6,", 0), 0u);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("method"), "lgm");
  EXPECT_EQ(j.at("rows").size(), 2u);
  // Same inputs, same report.
  std::ostringstream again;
  evaluate(m, "lgm", tasks, n_list, opts).write_csv(again);
  EXPECT_EQ(csv.str(), again.str());
}

TEST(BayesRisk, RatioNearOneAtSixtyFour) {
  const int n_list[] = {64};
  const auto rows = bayes_risk_curve(ObservationModel::gaussian_mean(1), n_list, 100000, 20);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].trials, 100000);
  EXPECT_DOUBLE_EQ(rows[0].reference, 1.0 / 128.0);
  EXPECT_GE(rows[0].ratio, 0.85);
  EXPECT_LE(rows[0].ratio, 1.15);
  // Closed form for unit noise: N log(1 + 1/(N + 1)).
  EXPECT_NEAR(rows[0].ratio, 64.0 * std::log1p(1.0 / 65.0), 4.0 * rows[0].std_error / rows[0].reference);
}

TEST(BayesRisk, LargerSamplesAreCloserToTheRate) {
  const int n_list[] = {8, 512};
  const auto rows = bayes_risk_curve(ObservationModel::gaussian_mean(1), n_list, 20000, 21);
  EXPECT_LT(std::abs(rows[1].ratio - 1.0), std::abs(rows[0].ratio - 1.0));
}

TEST(BayesRisk, AdditiveOverCoordinates) {
  const int n_list[] = {16, 64};
  const auto one = bayes_risk_curve(ObservationModel::gaussian_mean(1), n_list, 50000, 22);
  const auto two = bayes_risk_curve(ObservationModel::gaussian_mean(2), n_list, 50000, 23);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(two[i].mean_kl / one[i].mean_kl, 2.0, 0.2);
    EXPECT_DOUBLE_EQ(two[i].reference, 2.0 * one[i].reference);
  }
}

TEST(BayesRisk, NonConjugateModelIsAnError) {
  const int n_list[] = {8};
  EXPECT_THROW(bayes_risk_curve(ObservationModel::tanh_link(), n_list, 10, 1), DomainError);
}

TEST(Grid, MatchesConjugatePosteriorMoments) {
  const auto model = ObservationModel::gaussian_mean(1);
  const PointLogLikelihood ll = [&](double h, double x, double y) { return model.log_likelihood(h, x, y); };
  for (std::uint64_t t = 0; t < 20; ++t) {
    Rng rng(30 + t);
    std::normal_distribution<double> normal;
    const double h = normal(rng);
    const ContextSet ctx = model.sample(h, static_cast<Eigen::Index>(t % 9), rng);
    const GridPosterior g = grid_posterior(ll, ctx, GaussianBelief<double>::standard(1));
    const double n = static_cast<double>(ctx.size());
    EXPECT_NEAR(g.mean(), ctx.y.sum() / (n + 1.0), 1e-6);
    EXPECT_NEAR(g.variance(), 1.0 / (n + 1.0), 1e-6);
    EXPECT_NEAR(g.weights().sum(), 1.0, 1e-12);
    EXPECT_LE(g.tv_distance(g.mean(), g.variance()), 1e-4);
  }
}

TEST(Grid, EmptyContextGivesThePrior) {
  const GridPosterior g = grid_posterior([](double, double, double) { return 0.0; }, ContextSet{0, Matrix(0, 1), Matrix(0, 1)},
                                         GaussianBelief<double>{Vector::Constant(1, 0.5), Vector::Constant(1, 0.8)});
  // Only the prior tails beyond the grid are lost.
  EXPECT_NEAR(g.mean(), 0.5, 1e-6);
  EXPECT_NEAR(g.variance(), 0.8, 1e-6);
  EXPECT_LE(g.tv_distance(0.5, 0.8), 1e-6);
  EXPECT_GE(g.grid().size(), 4096);
  EXPECT_DOUBLE_EQ(g.grid()[0], -6.0);
}

TEST(Grid, AllMinusInfinityIsAnError) {
  const PointLogLikelihood impossible = [](double, double, double) { return -std::numeric_limits<double>::infinity(); };
  ContextSet one{0, Matrix::Zero(1, 1), Matrix::Zero(1, 1)};
  EXPECT_THROW(grid_posterior(impossible, one, std::nullopt), DomainError);
}

TEST(Grid, MaximumLikelihoodOfGaussianMeanIsTheAverage) {
  const auto model = ObservationModel::gaussian_mean(1);
  Rng rng(40);
  const ContextSet ctx = model.sample(1.3, 25, rng);
  const double mle = maximum_likelihood([&](double h, double x, double y) { return model.log_likelihood(h, x, y); }, ctx);
  EXPECT_NEAR(mle, ctx.y.mean(), 1e-7);
}

TEST(Fisher, TanhLinkClosedForm) {
  const auto model = ObservationModel::tanh_link(0.25);
  // E[x^2] = 4/3 for x ~ U(-2, 2); d tanh / dh = sech^2.
  const double sech2 = 1.0 / std::pow(std::cosh(0.5), 2);
  EXPECT_NEAR(model.fisher_information(0.5), (4.0 / 3.0) * sech2 * sech2 / 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(ObservationModel::gaussian_mean(1, 2.0).fisher_information(0.3), 0.5);
}

TEST(Bvm, ConjugateFlatPriorIsExactlyGaussian) {
  BvmOptions opts;
  opts.prior = std::nullopt;
  const int n_list[] = {4, 32, 256};
  const auto rows = bvm_check(ObservationModel::gaussian_mean(1), 0.3, n_list, 50, opts);
  for (const auto& r : rows) EXPECT_LE(r.max_tv, 1e-4) << "N=" << r.n;
}

TEST(Bvm, TanhLinkApproachesGaussianLimit) {
  const int n_list[] = {16, 256};
  const auto rows = bvm_check(ObservationModel::tanh_link(), 0.5, n_list, 500);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_LT(rows[1].tv.mean, rows[0].tv.mean);
  for (const auto& r : rows) {
    EXPECT_EQ(r.trials, 500);
    EXPECT_GE(r.tv.mean, 0.0);
    EXPECT_LE(r.max_tv, 1.0);
  }
}

TEST(Bvm, SingularFisherIsAnError) {
  const int n_list[] = {16};
  EXPECT_THROW(bvm_check(ObservationModel::tanh_link(), 40.0, n_list, 2), DomainError);
}

}  // namespace
}  // namespace brm

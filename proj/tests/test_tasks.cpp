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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <gtest/gtest.h>

#include "brm/errors.hpp"
#include "brm/random.hpp"
#include "brm/tasks.hpp"

namespace brm {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "brm_test_tasks";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<TaskRecord> make_records(TaskKind kind, int count, int points) {
  std::vector<TaskRecord> records;
  for (int i = 0; i < count; ++i) {
    TaskRecord r;
    r.task_id = static_cast<std::uint64_t>(i);
    r.task = sample_task(kind, derive_seed(77, {static_cast<std::uint64_t>(i)}));
    r.context_seed = derive_seed(78, {static_cast<std::uint64_t>(i)});
    r.context = sample_context(r.task, points, r.context_seed);
    records.push_back(std::move(r));
  }
  return records;
}

TEST(SampleTask, DeterministicInSeed) {
  for (TaskKind kind : {TaskKind::linear, TaskKind::piecewise_linear, TaskKind::conjugate_oracle}) {
    const TaskInstance a = sample_task(kind, 123), b = sample_task(kind, 123);
    EXPECT_EQ(a.h_star, b.h_star);
    const ContextSet ca = sample_context(a, 20, 5), cb = sample_context(b, 20, 5);
    EXPECT_EQ(ca.x, cb.x);
    EXPECT_EQ(ca.y, cb.y);
  }
}

TEST(SampleTask, UnknownKindIsAnError) {
  EXPECT_THROW(parse_task_kind("sinusoid"), DomainError);
  EXPECT_EQ(parse_task_kind("piecewise_linear"), TaskKind::piecewise_linear);
}

TEST(SampleTask, LinearRegressionRecoversCoefficients) {
  const TaskInstance task = sample_task(TaskKind::linear, 2024);
  ASSERT_EQ(task.h_star.size(), 2);
  const double a = task.h_star[0], c = task.h_star[1];
  const ContextSet ctx = sample_context(task, 10000, 9);
  const double n = static_cast<double>(ctx.size());
  const double xbar = ctx.x.col(0).mean(), ybar = ctx.y.col(0).mean();
  double sxx = 0, sxy = 0;
  for (Eigen::Index i = 0; i < ctx.size(); ++i) {
    sxx += (ctx.x(i, 0) - xbar) * (ctx.x(i, 0) - xbar);
    sxy += (ctx.x(i, 0) - xbar) * (ctx.y(i, 0) - ybar);
  }
  const double a_hat = sxy / sxx, c_hat = ybar - a_hat * xbar;
  const double sigma = task.noise_std;
  EXPECT_LE(std::abs(a_hat - a), 3.0 * sigma / std::sqrt(sxx));
  EXPECT_LE(std::abs(c_hat - c), 3.0 * sigma * std::sqrt(1.0 / n + xbar * xbar / sxx));
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(task.mean(ctx.x(i, 0)), a * ctx.x(i, 0) + c);
}

TEST(SampleTask, ConjugateOracleIsConstantMean) {
  const TaskInstance task = sample_task(TaskKind::conjugate_oracle, 31);
  ASSERT_EQ(task.h_star.size(), 1);
  EXPECT_EQ(task.noise_std, 1.0);
  EXPECT_EQ(task.mean(-1.5), task.h_star[0]);
  EXPECT_EQ(task.mean(1.9), task.h_star[0]);
}

TEST(SampleContext, EmptyContext) {
  const ContextSet c = sample_context(sample_task(TaskKind::linear, 1), 0, 2);
  EXPECT_EQ(c.size(), 0);
}

TEST(PiecewiseLinear, HandEvaluatedSpec) {
  PiecewiseLinearSpec spec;
  spec.breakpoints = {0.0};
  spec.segments = {{1.0, 0.0}, {1.0, 2.0}};
  EXPECT_DOUBLE_EQ(spec(-0.5), -0.5);
  EXPECT_DOUBLE_EQ(spec(0.5), 2.5);
  EXPECT_DOUBLE_EQ(spec.jump(0), 2.0);
}

TEST(PiecewiseLinear, JumpsEqualSegmentDifferences) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const TaskInstance task = sample_task(TaskKind::piecewise_linear, seed);
    const auto& s = task.piecewise;
    ASSERT_GE(s.breakpoints.size(), 1u);
    ASSERT_LE(s.breakpoints.size(), 3u);
    ASSERT_TRUE(std::is_sorted(s.breakpoints.begin(), s.breakpoints.end()));
    for (std::size_t j = 0; j < s.breakpoints.size(); ++j) {
      const double b = s.breakpoints[j];
      EXPECT_GT(b, -2.0);
      EXPECT_LT(b, 2.0);
      const double expected = (s.segments[j + 1].slope * b + s.segments[j + 1].intercept) -
                              (s.segments[j].slope * b + s.segments[j].intercept);
      EXPECT_NEAR(s.jump(j), expected, 1e-12 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(SampleContext, InputMeanWithinFourStandardErrors) {
  const ContextSet c = sample_context(sample_task(TaskKind::piecewise_linear, 3), 100000, 4);
  const double se = std::sqrt(16.0 / 12.0 / 100000.0);
  EXPECT_LE(std::abs(c.x.col(0).mean()), 4.0 * se);
  EXPECT_GE(c.x.minCoeff(), -2.0);
  EXPECT_LT(c.x.maxCoeff(), 2.0);
}

/// Asymptotic two-sample Kolmogorov-Smirnov p-value.
double ks_p_value(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  const double ne = static_cast<double>(a.size()) * b.size() / (a.size() + b.size());
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) q += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(q, 0.0, 1.0);
}

TEST(SampleContext, InputDistributionIsTaskIndependent) {
  constexpr int kPairs = 200;
  int passed = 0;
  for (int p = 0; p < kPairs; ++p) {
    const auto s = static_cast<std::uint64_t>(p);
    const ContextSet a = sample_context(sample_task(TaskKind::piecewise_linear, 1000 + s), 10000, 2000 + s);
    const ContextSet b = sample_context(sample_task(TaskKind::linear, 3000 + s), 10000, 4000 + s);
    const std::vector<double> xa(a.x.data(), a.x.data() + a.size()), xb(b.x.data(), b.x.data() + b.size());
    if (ks_p_value(xa, xb) > 0.01) ++passed;
  }
  EXPECT_GE(passed, kPairs * 99 / 100);
}

TEST(TaskFiles, SaveLoadSaveIsByteIdentical) {
  const auto records = make_records(TaskKind::piecewise_linear, 20, 13);
  const auto p1 = temp_file("a.jsonl"), p2 = temp_file("b.jsonl");
  save_tasks(p1, records);
  const auto loaded = load_tasks(p1);
  save_tasks(p2, loaded);
  EXPECT_EQ(read_file(p1), read_file(p2));
  ASSERT_EQ(loaded.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(loaded[i].context.y, records[i].context.y);
    EXPECT_EQ(loaded[i].context.x, records[i].context.x);
    EXPECT_EQ(loaded[i].task.h_star, records[i].task.h_star);
  }
}

TEST(TaskFiles, ThousandTasksRoundTripWithChecksum) {
  const auto records = make_records(TaskKind::linear, 1000, 8);
  const auto p1 = temp_file("k1.jsonl"), p2 = temp_file("k2.jsonl");
  save_tasks(p1, records);
  save_tasks(p2, load_tasks(p1));
  const auto h = std::hash<std::string>{};
  EXPECT_EQ(h(read_file(p1)), h(read_file(p2)));
}

TEST(TaskFiles, TruncatedFileIsAParseError) {
  const auto records = make_records(TaskKind::linear, 3, 4);
  const auto p = temp_file("trunc.jsonl");
  save_tasks(p, records);
  const std::string full = read_file(p);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << full.substr(0, full.size() - 10);
  }
  try {
    load_tasks(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  // A missing final newline alone also counts as truncation.
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << full.substr(0, full.size() - 1);
  }
  EXPECT_THROW(load_tasks(p), ParseError);
}

TEST(TaskFiles, MalformedLineReportsLocation) {
  const auto records = make_records(TaskKind::linear, 2, 3);
  std::string text = serialize_task(records[0]) + "{\"task_id\": oops}\n";
  try {
    parse_tasks(text);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(TaskFiles, EmptyFileHasNoRecords) {
  const auto p = temp_file("empty.jsonl");
  save_tasks(p, {});
  EXPECT_TRUE(load_tasks(p).empty());
  EXPECT_EQ(fs::file_size(p), 0u);
}

}  // namespace
}  // namespace brm

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

#include "brm/tasks.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "brm/errors.hpp"
#include "brm/random.hpp"

namespace brm {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::linear: return "linear";
    case TaskKind::piecewise_linear: return "piecewise_linear";
    case TaskKind::conjugate_oracle: return "conjugate_oracle";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "linear") return TaskKind::linear;
  if (name == "piecewise_linear") return TaskKind::piecewise_linear;
  if (name == "conjugate_oracle") return TaskKind::conjugate_oracle;
  throw DomainError("unknown task kind '" + std::string(name) +
                    "' (expected linear, piecewise_linear or conjugate_oracle)");
}

// ---------------------------------------------------------------------------

std::size_t PiecewiseLinearSpec::segment_index(double x) const {
  return static_cast<std::size_t>(std::upper_bound(breakpoints.begin(), breakpoints.end(), x) -
                                  breakpoints.begin());
}

double PiecewiseLinearSpec::operator()(double x) const {
  const Segment& s = segments.at(segment_index(x));
  return s.slope * x + s.intercept;
}

double PiecewiseLinearSpec::jump(std::size_t j) const {
  const double b = breakpoints.at(j);
  const Segment& left = segments.at(j);
  const Segment& right = segments.at(j + 1);
  return (right.intercept - left.intercept) + (right.slope - left.slope) * b;
}

double TaskInstance::mean(double x) const {
  switch (kind) {
    case TaskKind::linear: return h_star[0] * x + h_star[1];
    case TaskKind::conjugate_oracle: return h_star[0];
    case TaskKind::piecewise_linear: return piecewise(x);
  }
  return 0.0;
}

ContextSet ContextSet::slice(Eigen::Index begin, Eigen::Index count) const {
  return {task_id, x.middleRows(begin, count), y.middleRows(begin, count)};
}

TaskInstance sample_task(TaskKind kind, std::uint64_t seed, const TaskHyperprior& hyper) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  TaskInstance task;
  task.kind = kind;
  task.seed = seed;
  switch (kind) {
    case TaskKind::linear: {
      task.noise_std = hyper.linear_noise_std;
      task.h_star.resize(2);
      task.h_star[0] = normal(rng);
      task.h_star[1] = normal(rng);
      break;
    }
    case TaskKind::conjugate_oracle: {
      task.noise_std = hyper.conjugate_noise_std;
      task.h_star.resize(1);
      task.h_star[0] = normal(rng);
      break;
    }
    case TaskKind::piecewise_linear: {
      if (hyper.max_breakpoints < 1) throw DomainError("piecewise hyperprior: max_breakpoints must be >= 1");
      task.noise_std = hyper.piecewise_noise_std;
      std::uniform_int_distribution<int> count(1, hyper.max_breakpoints);
      std::uniform_real_distribution<double> position(kInputLow, kInputHigh);
      auto& spec = task.piecewise;
      spec.noise_std = task.noise_std;
      spec.breakpoints.resize(static_cast<std::size_t>(count(rng)));
      for (auto& b : spec.breakpoints) b = position(rng);
      std::sort(spec.breakpoints.begin(), spec.breakpoints.end());
      spec.segments.resize(spec.breakpoints.size() + 1);
      for (auto& s : spec.segments) {
        s.slope = normal(rng);
        s.intercept = normal(rng);
      }
      const auto nb = static_cast<Eigen::Index>(spec.breakpoints.size());
      task.h_star.resize(nb + 2 * (nb + 1));
      for (Eigen::Index j = 0; j < nb; ++j) task.h_star[j] = spec.breakpoints[static_cast<std::size_t>(j)];
      for (Eigen::Index j = 0; j <= nb; ++j) {
        task.h_star[nb + 2 * j] = spec.segments[static_cast<std::size_t>(j)].slope;
        task.h_star[nb + 2 * j + 1] = spec.segments[static_cast<std::size_t>(j)].intercept;
      }
      break;
    }
  }
  return task;
}

ContextSet sample_context(const TaskInstance& task, Eigen::Index n, std::uint64_t seed) {
  if (n < 0) throw DomainError("sample_context: negative point count");
  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(kInputLow, kInputHigh);
  std::normal_distribution<double> normal(0.0, 1.0);
  ContextSet out;
  out.x.resize(n, 1);
  out.y.resize(n, 1);
  // All inputs are drawn before any noise so the x stream is identical for
  // every task given the seed.
  for (Eigen::Index i = 0; i < n; ++i) out.x(i, 0) = uniform(rng);
  for (Eigen::Index i = 0; i < n; ++i) out.y(i, 0) = task.mean(out.x(i, 0)) + task.noise_std * normal(rng);
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines serialization

namespace {

void put_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

template <typename Range>
void put_array(std::string& out, const Range& values) {
  out += '[';
  bool first = true;
  for (double v : values) {
    if (!first) out += ',';
    first = false;
    put_double(out, v);
  }
  out += ']';
}

void put_rows(std::string& out, const Matrix& m) {
  out += '[';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (r) out += ',';
    std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
    put_array(out, row);
  }
  out += ']';
}

Matrix rows_from_json(const nlohmann::json& rows, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto& row = rows.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw DomainError("row width mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

TaskRecord record_from_json(const nlohmann::json& j) {
  TaskRecord rec;
  rec.task_id = j.at("task_id").get<std::uint64_t>();
  rec.task.kind = parse_task_kind(j.at("kind").get<std::string>());
  rec.task.seed = j.at("seed").get<std::uint64_t>();
  rec.task.noise_std = j.at("noise_std").get<double>();
  const auto h = j.at("h_star").get<std::vector<double>>();
  rec.task.h_star = Eigen::Map<const Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
  if (rec.task.kind == TaskKind::piecewise_linear) {
    auto& spec = rec.task.piecewise;
    spec.noise_std = rec.task.noise_std;
    spec.breakpoints = j.at("breakpoints").get<std::vector<double>>();
    for (const auto& s : j.at("segments")) {
      spec.segments.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    }
    if (spec.segments.size() != spec.breakpoints.size() + 1) throw DomainError("segment count mismatch");
  }
  rec.context_seed = j.at("context_seed").get<std::uint64_t>();
  rec.context.task_id = rec.task_id;
  rec.context.x = rows_from_json(j.at("x"), 1);
  rec.context.y = rows_from_json(j.at("y"), 1);
  if (rec.context.x.rows() != rec.context.y.rows()) throw DomainError("x and y lengths differ");
  return rec;
}

}  // namespace

std::string serialize_task(const TaskRecord& rec) {
  std::string out = "{\"task_id\":" + std::to_string(rec.task_id);
  out += ",\"kind\":\"" + std::string(to_string(rec.task.kind)) + "\"";
  out += ",\"seed\":" + std::to_string(rec.task.seed);
  out += ",\"noise_std\":";
  put_double(out, rec.task.noise_std);
  out += ",\"h_star\":";
  put_array(out, std::vector<double>(rec.task.h_star.data(), rec.task.h_star.data() + rec.task.h_star.size()));
  if (rec.task.kind == TaskKind::piecewise_linear) {
    out += ",\"breakpoints\":";
    put_array(out, rec.task.piecewise.breakpoints);
    out += ",\"segments\":[";
    for (std::size_t s = 0; s < rec.task.piecewise.segments.size(); ++s) {
      if (s) out += ',';
      const auto& seg = rec.task.piecewise.segments[s];
      put_array(out, std::vector<double>{seg.slope, seg.intercept});
    }
    out += ']';
  }
  out += ",\"context_seed\":" + std::to_string(rec.context_seed);
  out += ",\"x\":";
  put_rows(out, rec.context.x);
  out += ",\"y\":";
  put_rows(out, rec.context.y);
  out += "}\n";
  return out;
}

void save_tasks(const std::filesystem::path& path, std::span<const TaskRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_tasks: cannot open " + path.string());
  for (const auto& rec : records) out << serialize_task(rec);
  if (!out) throw std::runtime_error("save_tasks: write failed for " + path.string());
}

std::vector<TaskRecord> parse_tasks(std::string_view text) {
  std::vector<TaskRecord> records;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    ++line_no;
    const auto end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      throw ParseError("task file: last line is not newline-terminated (truncated?)", line_no, text.size() - pos);
    }
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("task file: ") + e.what(), line_no, e.byte);
    }
    try {
      records.push_back(record_from_json(j));
    } catch (const std::exception& e) {
      throw ParseError(std::string("task file: invalid record: ") + e.what(), line_no, 0);
    }
  }
  return records;
}

std::vector<TaskRecord> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_tasks: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_tasks(buffer.str());
}

}  // namespace brm

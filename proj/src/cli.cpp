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

#include "brm/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "brm/analysis.hpp"
#include "brm/errors.hpp"
#include "brm/verify.hpp"

namespace brm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

nlohmann::json ExperimentConfig::to_json() const {
  json train_json = train.to_json();
  train_json.erase("seed");
  return {{"experiment", experiment},
          {"seed", seed},
          {"out", out.string()},
          {"task",
           {{"kind", std::string(to_string(task_kind))},
            {"count", train_tasks},
            {"linear_noise_std", hyperprior.linear_noise_std},
            {"piecewise_noise_std", hyperprior.piecewise_noise_std},
            {"max_breakpoints", hyperprior.max_breakpoints},
            {"conjugate_noise_std", hyperprior.conjugate_noise_std}}},
          {"model", model.to_json()},
          {"train", train_json},
          {"eval",
           {{"n_list", eval.n_list},
            {"curve_n_list", eval.curve_n_list},
            {"tasks", eval.tasks},
            {"queries_per_task", eval.queries_per_task},
            {"mc_samples", eval.mc_samples}}}};
}

namespace {

void check_fields(const json& defaults, const json& got, const std::string& prefix) {
  if (!got.is_object()) throw ConfigError("config: '" + prefix + "' must be an object");
  for (const auto& [key, value] : defaults.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!got.contains(key)) throw ConfigError("config: missing field '" + path + "' (default: " + value.dump() + ")");
    if (value.is_object()) check_fields(value, got.at(key), path);
  }
  for (const auto& [key, value] : got.items()) {
    if (!defaults.contains(key)) {
      throw ConfigError("config: unknown field '" + (prefix.empty() ? key : prefix + "." + key) + "'");
    }
  }
}

void check_n_list(const std::vector<int>& n, const char* name) {
  if (n.empty()) throw ConfigError(std::string("config: eval.") + name + " is empty");
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (n[i] < 1 || (i > 0 && n[i] <= n[i - 1])) {
      throw ConfigError(std::string("config: eval.") + name + " must be positive and strictly increasing");
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_fields(ExperimentConfig{}.to_json(), j, "");
  try {
    ExperimentConfig c;
    c.experiment = j.at("experiment").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.out = j.at("out").get<std::string>();
    const json& t = j.at("task");
    c.task_kind = parse_task_kind(t.at("kind").get<std::string>());
    c.train_tasks = t.at("count").get<int>();
    c.hyperprior.linear_noise_std = t.at("linear_noise_std").get<double>();
    c.hyperprior.piecewise_noise_std = t.at("piecewise_noise_std").get<double>();
    c.hyperprior.max_breakpoints = t.at("max_breakpoints").get<int>();
    c.hyperprior.conjugate_noise_std = t.at("conjugate_noise_std").get<double>();
    c.model = ModelConfig::from_json(j.at("model"));
    json train_json = j.at("train");
    train_json["seed"] = c.seed;
    c.train = TrainConfig::from_json(train_json);
    const json& e = j.at("eval");
    c.eval.n_list = e.at("n_list").get<std::vector<int>>();
    c.eval.curve_n_list = e.at("curve_n_list").get<std::vector<int>>();
    c.eval.tasks = e.at("tasks").get<int>();
    c.eval.queries_per_task = e.at("queries_per_task").get<int>();
    c.eval.mc_samples = e.at("mc_samples").get<int>();
    if (c.train_tasks < 0 || c.eval.tasks < 1 || c.eval.queries_per_task < 1 || c.eval.mc_samples < 2) {
      throw ConfigError("config: task.count >= 0, eval.tasks >= 1, eval.queries_per_task >= 1, eval.mc_samples >= 2");
    }
    check_n_list(c.eval.n_list, "n_list");
    check_n_list(c.eval.curve_n_list, "curve_n_list");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string aggregator;
  int threads = 0;
  bool force = false;
};

struct Io {
  std::ostream& out;
  std::ostream& err;
};

ExperimentConfig resolve(const CommonFlags& flags) {
  ExperimentConfig c = flags.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(flags.config);
  if (flags.seed) c.seed = *flags.seed;
  if (!flags.out.empty()) c.out = flags.out;
  if (!flags.aggregator.empty()) {
    try {
      c.model.aggregator = parse_aggregator(flags.aggregator);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (c.model.learn_prior && (c.model.aggregator == AggregatorKind::lgm || c.model.aggregator == AggregatorKind::gqn)) {
      c.model.learn_prior = false;
    }
    c.model.validate();
  }
  c.train.seed = c.seed;
  return c;
}

int thread_count(int requested) {
  if (requested < 0) throw ConfigError("--threads must be >= 0");
  return requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

void refuse_existing(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) throw ConfigError(path.string() + " exists; pass --force to overwrite");
}

std::vector<TaskRecord> generate_records(const ExperimentConfig& c, int count, std::uint64_t stream) {
  std::vector<TaskRecord> records;
  records.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto id = static_cast<std::uint64_t>(i);
    TaskRecord r;
    r.task_id = id;
    r.task = sample_task(c.task_kind, derive_seed(c.seed, {stream, id}), c.hyperprior);
    r.context_seed = derive_seed(c.seed, {stream + 1, id});
    r.context = sample_context(r.task, c.train.max_context, r.context_seed);
    r.context.task_id = id;
    records.push_back(std::move(r));
  }
  return records;
}

constexpr std::uint64_t kTrainStream = 10;
constexpr std::uint64_t kHeldoutStream = 20;

json sidecar(const ExperimentConfig& c, const std::string& split, std::size_t count) {
  return {{"format", "brm-tasks-v1"}, {"split", split},           {"count", count},
          {"seed", c.seed},           {"config", c.to_json()}};
}

/// Task instances from `<out>/<split>.jsonl` when present, else regenerated
/// from the config (which yields the same tasks).
std::vector<TaskInstance> task_pool(const ExperimentConfig& c, const std::string& split) {
  const fs::path file = c.out / (split + ".jsonl");
  std::vector<TaskRecord> records;
  if (fs::exists(file)) {
    records = load_tasks(file);
  } else {
    records = split == "tasks" ? generate_records(c, c.train_tasks, kTrainStream)
                               : generate_records(c, c.eval.tasks, kHeldoutStream);
  }
  std::vector<TaskInstance> tasks;
  for (auto& r : records) tasks.push_back(std::move(r.task));
  return tasks;
}

int cmd_generate(const ExperimentConfig& c, const CommonFlags& flags, std::optional<int> count, Io io) {
  const int n = count.value_or(c.train_tasks);
  if (n < 0) throw ConfigError("--count must be >= 0");
  const fs::path tasks = c.out / "tasks.jsonl", heldout = c.out / "heldout.jsonl";
  refuse_existing(tasks, flags.force);
  refuse_existing(heldout, flags.force);
  fs::create_directories(c.out);
  const auto train_records = generate_records(c, n, kTrainStream);
  const auto heldout_records = generate_records(c, c.eval.tasks, kHeldoutStream);
  save_tasks(tasks, train_records);
  save_tasks(heldout, heldout_records);
  write_text(c.out / "tasks.meta.json", sidecar(c, "tasks", train_records.size()).dump(2) + "\n");
  write_text(c.out / "heldout.meta.json", sidecar(c, "heldout", heldout_records.size()).dump(2) + "\n");
  io.out << fmt::format("wrote {} training tasks to {} and {} held-out tasks to {}\n", train_records.size(),
                        tasks.string(), heldout_records.size(), heldout.string());
  return kExitOk;
}

fs::path method_dir(const ExperimentConfig& c, AggregatorKind kind) { return c.out / std::string(to_string(kind)); }

int cmd_train(const ExperimentConfig& c, const CommonFlags& flags, bool resume, Io io) {
  const fs::path dir = method_dir(c, c.model.aggregator);
  const fs::path model_stem = dir / "model", checkpoint_stem = dir / "checkpoint";
  if (!resume) refuse_existing(fs::path(model_stem).concat(".json"), flags.force);
  fs::create_directories(dir);
  const auto pool = task_pool(c, "tasks");

  TrainState state;
  if (resume) {
    if (!fs::exists(fs::path(checkpoint_stem).concat(".json"))) {
      throw ConfigError("--resume: no checkpoint at " + checkpoint_stem.string() + ".json");
    }
    json header;
    Model model = load_model(checkpoint_stem, &header);
    if (model.config.to_json() != c.model.to_json()) throw ConfigError("--resume: checkpoint model config differs");
    if (header.value("train", json{}) != c.train.to_json()) throw ConfigError("--resume: checkpoint train config differs");
    state = {std::move(model), 0, header.value("running_loss", 0.0)};
    state.step = state.model.params.step();
    io.out << "resuming at step " << state.step << "\n";
  } else {
    state = initial_state(c.model, c.train);
  }

  std::ofstream log(dir / "train_log.csv", resume ? std::ios::app : std::ios::trunc);
  TrainHooks hooks;
  hooks.log = &log;
  hooks.dump_dir = dir;
  hooks.checkpoint = [&](const TrainState& s) {
    save_model(s.model, checkpoint_stem, {{"running_loss", s.running_loss}, {"train", c.train.to_json()}});
  };
  write_text(dir / "run.json", json{{"command", "train"}, {"config", c.to_json()}}.dump(2) + "\n");
  state = train(pool, c.train, std::move(state), hooks);
  save_model(state.model, model_stem, {{"running_loss", state.running_loss}, {"train", c.train.to_json()}});
  io.out << fmt::format("trained {} for {} steps (loss ema {:.5f}); model at {}.json\n", to_string(c.model.aggregator),
                        state.step, state.running_loss, model_stem.string());
  return kExitOk;
}

EvalOptions eval_options(const ExperimentConfig& c, int threads) {
  EvalOptions o;
  o.queries_per_task = c.eval.queries_per_task;
  o.mc_samples = c.eval.mc_samples;
  o.seed = derive_seed(c.seed, {kHeldoutStream, 7});
  o.threads = threads;
  return o;
}

Model load_method(const ExperimentConfig& c, AggregatorKind kind) {
  const fs::path stem = method_dir(c, kind) / "model";
  if (!fs::exists(fs::path(stem).concat(".json"))) {
    throw ConfigError("no trained model at " + stem.string() + ".json (run `train --aggregator " +
                      std::string(to_string(kind)) + "` first)");
  }
  return load_model(stem);
}

std::string report_name(const ExperimentConfig& c, const std::string& method) {
  return fmt::format("{}_{}_{}", c.experiment, method, c.seed);
}

int cmd_eval(const ExperimentConfig& c, const CommonFlags& flags, Io io) {
  const Model model = load_method(c, c.model.aggregator);
  const auto tasks = task_pool(c, "heldout");
  const std::string method(to_string(c.model.aggregator));
  EvalReport report = evaluate(model, method, tasks, c.eval.n_list, eval_options(c, thread_count(flags.threads)));
  report.metadata["checkpoint"] = (method_dir(c, c.model.aggregator) / "model.json").string();
  report.metadata["checkpoint_step"] = model.params.step();
  report.metadata["experiment"] = c.experiment;
  std::ostringstream csv;
  report.write_csv(csv);
  const fs::path base = c.out / report_name(c, method);
  write_text(fs::path(base).concat(".csv"), csv.str());
  write_text(fs::path(base).concat(".json"), report.to_json().dump(2) + "\n");
  io.out << csv.str();
  return kExitOk;
}

void write_curve(const fs::path& path, const std::vector<std::pair<std::string, std::vector<CurvePoint>>>& curves) {
  std::string text = "method,n,tasks,mean,std\n";
  for (const auto& [method, points] : curves) {
    for (const auto& p : points) {
      text += fmt::format("{},{},{},{:.17g},{:.17g}\n", method, p.n, p.value.count, p.value.mean, p.value.std);
    }
  }
  write_text(path, text);
}

int cmd_compare(const ExperimentConfig& c, const CommonFlags& flags, const std::vector<std::string>& method_names,
                Io io) {
  std::vector<AggregatorKind> kinds;
  if (method_names.empty()) {
    for (auto k : {AggregatorKind::brm, AggregatorKind::np, AggregatorKind::lgm, AggregatorKind::gqn}) {
      if (fs::exists(method_dir(c, k) / "model.json")) kinds.push_back(k);
    }
    if (kinds.empty()) throw ConfigError("compare: no trained models under " + c.out.string());
  } else {
    for (const auto& m : method_names) {
      try {
        kinds.push_back(parse_aggregator(m));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
  }
  std::vector<Model> models;
  for (auto k : kinds) models.push_back(load_method(c, k));
  for (const auto& m : models) {
    if (m.config.latent_dim != models.front().config.latent_dim) {
      throw ConfigError(fmt::format("compare: incompatible latent dims ({} has d={}, {} has d={})",
                                    to_string(models.front().config.aggregator), models.front().config.latent_dim,
                                    to_string(m.config.aggregator), m.config.latent_dim));
    }
  }
  const auto tasks = task_pool(c, "heldout");
  const EvalOptions options = eval_options(c, thread_count(flags.threads));

  std::vector<EvalReport> reports;
  std::vector<std::pair<std::string, std::vector<CurvePoint>>> mse, variance;
  json slopes = json::object();
  for (const auto& m : models) {
    const std::string method(to_string(m.config.aggregator));
    reports.push_back(evaluate(m, method, tasks, c.eval.n_list, options));
    mse.emplace_back(method, mse_curve(m, tasks, c.eval.curve_n_list, options));
    if (c.eval.curve_n_list.size() >= 4) {
      VarianceCurve vc = variance_curve(m, tasks, c.eval.curve_n_list, options);
      slopes[method] = vc.slope;
      variance.emplace_back(method, std::move(vc.points));
    }
  }

  std::string table = "N";
  for (const auto& r : reports) table += "," + r.method;
  table += "\n";
  for (std::size_t k = 0; k < c.eval.n_list.size(); ++k) {
    table += std::to_string(c.eval.n_list[k]);
    for (const auto& r : reports) table += fmt::format(",{:.17g}", r.rows[k].log_likelihood.mean);
    table += "\n";
  }
  write_text(c.out / (report_name(c, "compare") + ".csv"), table);
  write_curve(c.out / (report_name(c, "mse_curve") + ".csv"), mse);
  if (!variance.empty()) write_curve(c.out / (report_name(c, "variance_curve") + ".csv"), variance);
  json summary = {{"experiment", c.experiment}, {"seed", c.seed}, {"variance_slopes", slopes}};
  for (const auto& r : reports) summary["reports"].push_back(r.to_json());
  write_text(c.out / (report_name(c, "compare") + ".json"), summary.dump(2) + "\n");
  io.out << table;
  return kExitOk;
}

int cmd_verify(const ExperimentConfig& c, const CommonFlags& flags, const std::string& filter, Io io) {
  VerifyOptions options;
  options.filter = filter;
  options.threads = thread_count(flags.threads);
  if (flags.seed) options.seed = c.seed;
  options.on_result = [&](const PropertyResult& r) { io.out << r.line() << std::endl; };
  const auto results = run_verification(options);
  if (results.empty()) throw ConfigError("verify: no property matches filter '" + filter + "'");
  json report = {{"passed", true}, {"properties", json::array()}, {"failures", json::array()}};
  for (const auto& r : results) {
    report["properties"].push_back(r.to_json());
    if (!r.passed) {
      report["passed"] = false;
      report["failures"].push_back(r.to_json());
    }
  }
  const bool ok = report["passed"].get<bool>();
  if (!flags.out.empty()) write_text(c.out / "verify_report.json", report.dump(2) + "\n");
  if (!ok) io.err << report["failures"].dump() << "\n";
  io.out << fmt::format("{} of {} properties passed\n", results.size() - report["failures"].size(), results.size());
  return ok ? kExitOk : kExitVerifyFailed;
}

void configure_logging(std::ostream& err) {
  auto logger = spdlog::get("brm_meta");
  if (!logger) {
    logger = spdlog::stderr_color_mt("brm_meta");
    spdlog::set_default_logger(logger);
  }
  const char* level = std::getenv("BRM_META_LOG");
  if (!level) {
    spdlog::set_level(spdlog::level::warn);
    return;
  }
  const std::string name(level);
  if (name == "error" || name == "info" || name == "debug") {
    spdlog::set_level(spdlog::level::from_str(name));
  } else {
    spdlog::set_level(spdlog::level::warn);
    err << "ignoring BRM_META_LOG=" << name << " (expected error, info or debug)\n";
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging(err);
  CLI::App app{"Meta-learning with Bayes-risk-minimizing posterior aggregation"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::optional<int> count;
  std::string filter;
  std::vector<std::string> methods;
  bool resume = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "Experiment config JSON (every field required)");
    sub->add_option("--seed", flags.seed, "Seed overriding the config");
    sub->add_option("--out", flags.out, "Output directory");
    sub->add_option("--aggregator", flags.aggregator, "brm, lgm, np or gqn");
    sub->add_option("--threads", flags.threads, "Worker threads (0 = all cores)");
    sub->add_flag("--force", flags.force, "Overwrite existing outputs");
  };
  auto* gen = app.add_subcommand("generate", "Write training and held-out task files");
  add_common(gen);
  gen->add_option("--count", count, "Number of training tasks");
  auto* tr = app.add_subcommand("train", "Train one method");
  add_common(tr);
  tr->add_flag("--resume", resume, "Continue from <out>/<method>/checkpoint");
  auto* ev = app.add_subcommand("eval", "Evaluate one trained method on held-out tasks");
  add_common(ev);
  auto* cmp = app.add_subcommand("compare", "Table of predictive log-likelihood per N and method, plus curves");
  add_common(cmp);
  cmp->add_option("--methods", methods, "Methods to compare (default: all trained)")->delimiter(',');
  auto* ver = app.add_subcommand("verify", "Run the property suite");
  add_common(ver);
  ver->add_option("--filter", filter, "Run only properties whose name contains this");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  Io io{out, err};
  try {
    const ExperimentConfig c = resolve(flags);
    if (gen->parsed()) return cmd_generate(c, flags, count, io);
    if (tr->parsed()) return cmd_train(c, flags, resume, io);
    if (ev->parsed()) return cmd_eval(c, flags, io);
    if (cmp->parsed()) return cmd_compare(c, flags, methods, io);
    return cmd_verify(c, flags, filter, io);
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\ndiagnostic dump: " << e.dump_path() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace brm

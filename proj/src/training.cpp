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

#include "brm/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "brm/errors.hpp"

namespace brm {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw DomainError("TrainConfig: lr must be positive");
  if (batch_tasks < 1 || mc_samples < 1 || min_context < 1 || max_context < min_context || max_steps < 0 ||
      log_every < 1 || checkpoint_every < 0) {
    throw DomainError("TrainConfig: counts must be >= 1 and min_context <= max_context");
  }
  if (target_split && min_context < 2) throw DomainError("TrainConfig: target_split needs min_context >= 2");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"batch_tasks", batch_tasks},
          {"max_steps", max_steps},
          {"mc_samples", mc_samples},
          {"seed", seed},
          {"min_context", min_context},
          {"max_context", max_context},
          {"target_split", target_split},
          {"log_every", log_every},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.batch_tasks = j.at("batch_tasks").get<int>();
  c.max_steps = j.at("max_steps").get<std::int64_t>();
  c.mc_samples = j.at("mc_samples").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.min_context = j.at("min_context").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.target_split = j.at("target_split").get<bool>();
  c.log_every = j.at("log_every").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

ElboNodes elbo(Tape& tape, const BoundParams& params, const ModelConfig& config, const Batch& posterior_batch,
               const Batch& likelihood_batch, int mc_samples, Rng& rng) {
  if (mc_samples < 1) throw DomainError("elbo: need at least one Monte-Carlo sample");
  if (posterior_batch.tasks != likelihood_batch.tasks) throw ShapeError("elbo: batches differ in task count");
  const Eigen::Index T = posterior_batch.tasks;
  const Eigen::Index d = config.latent_dim;
  for (int n : likelihood_batch.points_per_task) {
    if (n == 0) throw DomainError("elbo: empty context");
  }
  PosteriorNodes post = posterior(tape, params, config, posterior_batch);
  Var x = tape.constant(likelihood_batch.x);
  Var y = tape.constant(likelihood_batch.y);
  const auto& rows = likelihood_batch.point_task;

  auto recon_for = [&](Var h) {
    PredictiveNodes pred = decode(tape, params, config, x, gather_rows(h, rows));
    return segment_sum(gaussian_logpdf_rows(tape, y, pred), rows, T);
  };

  if (config.aggregator == AggregatorKind::gqn) {
    Var recon = recon_for(post.mu);
    Var kl = tape.constant(Matrix::Zero(T, 1));
    return {scale(sum(-recon), 1.0 / static_cast<double>(T)), recon, kl};
  }

  Var stddev = sqrt(*post.var);
  std::optional<Var> total;
  for (int s = 0; s < mc_samples; ++s) {
    Matrix noise(T, d);
    fill_standard_normal(noise, rng);
    Var h = post.mu + stddev * tape.constant(std::move(noise));
    Var r = recon_for(h);
    total = total ? *total + r : r;
  }
  Var recon = scale(*total, 1.0 / mc_samples);
  Var kl = kl_rows(post.mu, *post.var, prior_nodes(tape, params, config));
  return {scale(sum(kl - recon), 1.0 / static_cast<double>(T)), recon, kl};
}

namespace {

int posterior_group_size(const ModelConfig& config) {
  return config.aggregator == AggregatorKind::brm ? config.group_size : 1;
}

}  // namespace

ElboValue elbo(const Model& model, const ContextSet& context, int mc_samples, Rng& rng) {
  Tape tape;
  BoundParams params = bind_frozen(tape, model.params);
  const ContextSet contexts[] = {context};
  Batch post = Batch::build(contexts, posterior_group_size(model.config), model.config.keep_partial_group);
  Batch lik = Batch::build(contexts, 1, true);
  ElboNodes nodes = elbo(tape, params, model.config, post, lik, mc_samples, rng);
  return {nodes.loss.value()(0, 0), nodes.recon.value()(0, 0), nodes.kl.value()(0, 0)};
}

// ---------------------------------------------------------------------------

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& config) {
  config.validate();
  return {make_model(model_config, derive_seed(config.seed, {0x1417})), 0, 0.0};
}

std::vector<ContextSet> draw_training_contexts(std::span<const TaskInstance> pool, const TrainConfig& config,
                                               std::int64_t step) {
  if (pool.empty()) throw DomainError("train: empty task pool");
  Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(step), 0}));
  std::uniform_int_distribution<int> size(config.min_context, config.max_context);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const int n = size(rng);
  std::vector<ContextSet> contexts;
  contexts.reserve(static_cast<std::size_t>(config.batch_tasks));
  for (int slot = 0; slot < config.batch_tasks; ++slot) {
    const std::size_t idx = pick(rng);
    ContextSet c = sample_context(
        pool[idx], n,
        derive_seed(config.seed, {static_cast<std::uint64_t>(step), 2, static_cast<std::uint64_t>(slot)}));
    c.task_id = idx;
    contexts.push_back(std::move(c));
  }
  return contexts;
}

namespace {

std::filesystem::path dump_batch(const std::filesystem::path& dir, std::int64_t step,
                                 std::span<const ContextSet> contexts) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("nan_batch_step" + std::to_string(step) + ".jsonl");
  std::vector<TaskRecord> records;
  for (const auto& c : contexts) {
    TaskRecord r;
    r.task_id = c.task_id;
    r.task.h_star = Vector::Zero(1);
    r.context = c;
    records.push_back(std::move(r));
  }
  save_tasks(path, records);
  return path;
}

}  // namespace

TrainState train(std::span<const TaskInstance> pool, const TrainConfig& config, TrainState state,
                 const TrainHooks& hooks) {
  config.validate();
  if (pool.empty()) throw DomainError("train: empty task pool");
  const AdamConfig adam{config.lr, config.beta1, config.beta2, config.eps};
  const auto start = std::chrono::steady_clock::now();
  if (hooks.log && state.step == 0) *hooks.log << "step,loss,recon,kl,wall_ms\n";

  while (state.step < config.max_steps) {
    const std::int64_t step = state.step;
    std::vector<ContextSet> contexts = draw_training_contexts(pool, config, step);
    std::vector<ContextSet> post_contexts = contexts, lik_contexts = contexts;
    if (config.target_split) {
      for (std::size_t i = 0; i < contexts.size(); ++i) {
        const Eigen::Index half = (contexts[i].size() + 1) / 2;
        post_contexts[i] = contexts[i].slice(0, half);
        lik_contexts[i] = contexts[i].slice(half, contexts[i].size() - half);
      }
    }
    const ModelConfig& mc = state.model.config;
    Batch post = Batch::build(post_contexts, posterior_group_size(mc), mc.keep_partial_group);
    Batch lik = Batch::build(lik_contexts, 1, true);

    Tape tape;
    BoundParams params = bind(tape, state.model.params);
    Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(step), 1}));
    ElboNodes nodes = elbo(tape, params, mc, post, lik, config.mc_samples, rng);
    const double loss = nodes.loss.value()(0, 0);
    if (!std::isfinite(loss)) {
      const auto path = dump_batch(hooks.dump_dir, step, contexts);
      throw NumericalAbort("non-finite loss at step " + std::to_string(step) + "; batch written to " + path.string(),
                           path.string());
    }
    tape.backward(nodes.loss);
    if (!std::isfinite(state.model.params.grad_norm_squared())) {
      const auto path = dump_batch(hooks.dump_dir, step, contexts);
      throw NumericalAbort("non-finite gradient at step " + std::to_string(step) + "; batch written to " +
                               path.string(),
                           path.string());
    }
    adam_step(state.model.params, adam);
    state.step = step + 1;
    state.running_loss = step == 0 ? loss : 0.99 * state.running_loss + 0.01 * loss;

    if (hooks.log && (step % config.log_every == 0 || state.step == config.max_steps)) {
      const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
      const double T = static_cast<double>(post.tasks);
      *hooks.log << step << ',' << loss << ',' << nodes.recon.value().sum() / T << ',' << nodes.kl.value().sum() / T
                 << ',' << wall.count() << '\n';
    }
    if (step % 1000 == 0) spdlog::debug("step {} loss {:.4f} (ema {:.4f})", step, loss, state.running_loss);
    if (hooks.checkpoint && config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 &&
        state.step != config.max_steps) {
      hooks.checkpoint(state);
    }
  }
  if (hooks.checkpoint) hooks.checkpoint(state);
  return state;
}

// ---------------------------------------------------------------------------

GaussianBelief<double> infer_posterior(const Model& model, const ContextSet& context,
                                       const IncrementSource& increments) {
  if (context.size() > 0 && (context.x.cols() != model.config.dx || context.y.cols() != model.config.dy)) {
    throw ShapeError("infer: context has dx=" + std::to_string(context.x.cols()) + ", dy=" +
                     std::to_string(context.y.cols()) + "; model expects dx=" + std::to_string(model.config.dx) +
                     ", dy=" + std::to_string(model.config.dy));
  }
  if (increments) {
    const auto incs = increments(context);
    return aggregate_brm<double>(incs, prior_belief(model));
  }
  Tape tape;
  BoundParams params = bind_frozen(tape, model.params);
  const ContextSet contexts[] = {context};
  Batch batch = Batch::build(contexts, posterior_group_size(model.config), model.config.keep_partial_group);
  PosteriorNodes post = posterior(tape, params, model.config, batch);
  GaussianBelief<double> out;
  out.mu = post.mu.value().row(0).transpose();
  out.var = post.var ? Vector(post.var->value().row(0).transpose()) : Vector::Zero(out.mu.size());
  return out;
}

Inference infer(const Model& model, const ContextSet& context, const Vector& query, const InferOptions& options) {
  if (query.size() != model.config.dx) {
    throw ShapeError("infer: query has " + std::to_string(query.size()) + " entries, model expects dx=" +
                     std::to_string(model.config.dx));
  }
  Inference out;
  out.posterior = infer_posterior(model, context, options.increments);
  out.h = out.posterior.mu;
  if (!options.deterministic) {
    Rng rng(options.seed);
    Vector noise(out.h.size());
    fill_standard_normal(noise, rng);
    out.h += out.posterior.var.cwiseSqrt().cwiseProduct(noise);
  }
  Predictive pred = decode(model, query, out.h);
  out.mean = pred.mean;
  out.var = pred.var;
  out.point = pred.mean[0];
  return out;
}

}  // namespace brm

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

// ELBO objective, the stochastic training loop and amortized inference.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "brm/models.hpp"
#include "brm/random.hpp"
#include "brm/tasks.hpp"

namespace brm {

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_tasks = 16;
  std::int64_t max_steps = 50000;
  int mc_samples = 1;
  std::uint64_t seed = 0;
  int min_context = 3;
  int max_context = 50;
  /// Evaluate the likelihood on a held-out half of each context instead of
  /// on the points that formed the posterior.
  bool target_split = false;
  int log_every = 100;
  /// 0 disables periodic checkpoints.
  std::int64_t checkpoint_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Scalar loss and its per-task parts on the tape.
struct ElboNodes {
  Var loss;   // 1 x 1: mean over tasks of -(recon - kl)
  Var recon;  // tasks x 1: (1/S) sum_s sum_n log q(y_n | x_n, h_s)
  Var kl;     // tasks x 1 (zeros for gqn)
};

/// Negative ELBO of a batch of tasks. `posterior_batch` forms q(h | D);
/// `likelihood_batch` supplies the points whose log-likelihood is scored
/// (the same points unless a target split is used). Reparameterization noise
/// is drawn from rng, S blocks of tasks x d.
ElboNodes elbo(Tape& tape, const BoundParams& params, const ModelConfig& config, const Batch& posterior_batch,
               const Batch& likelihood_batch, int mc_samples, Rng& rng);

/// Single-context convenience wrapper (value only).
struct ElboValue {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};
ElboValue elbo(const Model& model, const ContextSet& context, int mc_samples, Rng& rng);

struct TrainState {
  Model model;
  std::int64_t step = 0;
  double running_loss = 0.0;  // exponential moving average, factor 0.99
};

struct TrainHooks {
  /// CSV rows `step,loss,recon,kl,wall_ms` (header written when step 0 starts).
  std::ostream* log = nullptr;
  /// Called every checkpoint_every steps and once at exit.
  std::function<void(const TrainState&)> checkpoint;
  /// Where a diagnostic dump of a non-finite batch is written.
  std::filesystem::path dump_dir = ".";
};

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& config);

/// Runs minibatch training until state.step == config.max_steps. Every step
/// draws its randomness from (config.seed, step), so resuming a checkpointed
/// state reproduces the uninterrupted run bitwise.
TrainState train(std::span<const TaskInstance> pool, const TrainConfig& config, TrainState state,
                 const TrainHooks& hooks = {});

/// Contexts for one training step (exposed for tests and the NaN dump).
std::vector<ContextSet> draw_training_contexts(std::span<const TaskInstance> pool, const TrainConfig& config,
                                               std::int64_t step);

// ---------------------------------------------------------------------------

using IncrementSource = std::function<std::vector<NaturalIncrement<double>>(const ContextSet&)>;

struct InferOptions {
  /// Use the posterior mean instead of a sampled h.
  bool deterministic = true;
  std::uint64_t seed = 0;
  /// Replaces the learned encoder with externally computed increments that
  /// are combined by aggregate_brm.
  IncrementSource increments;
};

struct Inference {
  double point = 0.0;      // first coordinate of the predictive mean
  Vector mean;             // predictive mean at x*
  Vector var;              // decoder variance at x*
  GaussianBelief<double> posterior;  // var is zero for gqn (point mass)
  Vector h;                // latent used for decoding
};

Inference infer(const Model& model, const ContextSet& context, const Vector& query, const InferOptions& options = {});

/// Posterior only (no decoding).
GaussianBelief<double> infer_posterior(const Model& model, const ContextSet& context,
                                       const IncrementSource& increments = {});

}  // namespace brm

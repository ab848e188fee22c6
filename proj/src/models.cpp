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

#include "brm/models.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "brm/errors.hpp"
#include "brm/random.hpp"

namespace brm {

std::string_view to_string(AggregatorKind kind) {
  switch (kind) {
    case AggregatorKind::brm: return "brm";
    case AggregatorKind::lgm: return "lgm";
    case AggregatorKind::np: return "np";
    case AggregatorKind::gqn: return "gqn";
  }
  return "unknown";
}

AggregatorKind parse_aggregator(std::string_view name) {
  if (name == "brm") return AggregatorKind::brm;
  if (name == "lgm") return AggregatorKind::lgm;
  if (name == "np") return AggregatorKind::np;
  if (name == "gqn") return AggregatorKind::gqn;
  throw DomainError("unknown aggregator '" + std::string(name) + "' (expected brm, lgm, np or gqn)");
}

void ModelConfig::validate() const {
  if (latent_dim < 1 || dx < 1 || dy < 1 || group_size < 1 || hidden < 1) {
    throw DomainError("ModelConfig: latent_dim, dx, dy, group_size and hidden must all be >= 1");
  }
  if (learn_prior && (aggregator == AggregatorKind::lgm || aggregator == AggregatorKind::gqn)) {
    throw DomainError("ModelConfig: learn_prior applies to brm and np only");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"aggregator", std::string(to_string(aggregator))},
          {"latent_dim", latent_dim},
          {"dx", dx},
          {"dy", dy},
          {"group_size", group_size},
          {"hidden", hidden},
          {"learn_prior", learn_prior},
          {"keep_partial_group", keep_partial_group}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
  c.latent_dim = j.at("latent_dim").get<int>();
  c.dx = j.at("dx").get<int>();
  c.dy = j.at("dy").get<int>();
  c.group_size = j.at("group_size").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.learn_prior = j.at("learn_prior").get<bool>();
  c.keep_partial_group = j.at("keep_partial_group").get<bool>();
  c.validate();
  return c;
}

Model make_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model model{config, {}};
  auto& p = model.params;
  const auto d = static_cast<std::size_t>(config.latent_dim);
  const auto dx = static_cast<std::size_t>(config.dx);
  const auto dy = static_cast<std::size_t>(config.dy);
  const auto h = static_cast<std::size_t>(config.hidden);

  if (config.aggregator == AggregatorKind::lgm) {
    p.add_linear("lgm.in", dx, h, rng);
    p.add_linear("lgm.hidden", h, h, rng);
    p.add_linear("lgm.out", h, dy * d + 2 * dy, rng);
    return model;
  }
  p.add_linear("enc.in", dx + dy, h, rng);
  p.add_linear("enc.hidden", h, h, rng);
  Layer& out = p.add_linear("enc.out", h, config.aggregator == AggregatorKind::gqn ? d : 2 * d, rng);
  if (config.aggregator == AggregatorKind::brm) {
    out.bias.value.matrix().rightCols(static_cast<Eigen::Index>(d)).setConstant(softplus_inverse(0.1));
  }
  p.add_linear("dec.in", dx + d, h, rng);
  p.add_linear("dec.hidden", h, h, rng);
  p.add_linear("dec.out", h, 2 * dy, rng);
  if (config.learn_prior) {
    Matrix raw = Matrix::Constant(1, static_cast<Eigen::Index>(d), softplus_inverse(1.0));
    p.add_layer("prior", Tensor::zeros({1, d}), Tensor(Shape{d}, std::span<const double>(raw.data(), d)));
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& stem, nlohmann::json extra) {
  nlohmann::json header = std::move(extra);
  if (!header.is_object()) header = nlohmann::json::object();
  header["model"] = model.config.to_json();
  write_checkpoint(model.params, stem, header);
}

Model load_model(const std::filesystem::path& stem, nlohmann::json* extra) {
  Checkpoint ck = read_checkpoint(stem);
  if (!ck.header.contains("model")) throw ParseError("checkpoint header: missing 'model' section", 1, 0);
  Model model{ModelConfig::from_json(ck.header.at("model")), std::move(ck.params)};
  if (extra) *extra = ck.header;
  return model;
}

GaussianBelief<double> prior_belief(const Model& model) {
  const auto d = model.config.latent_dim;
  if (!model.config.learn_prior) return GaussianBelief<double>::standard(d);
  const Layer& prior = model.params.layer("prior");
  GaussianBelief<double> out;
  out.mu = prior.weight.value.matrix().row(0).transpose();
  out.var = prior.bias.value.matrix().row(0).transpose().unaryExpr([](double x) { return softplus(x); });
  return out;
}

// ---------------------------------------------------------------------------

BoundParams bind(Tape& tape, MlpParams& params) {
  BoundParams out;
  for (auto& [name, layer] : params.layers()) out[name] = {tape.param(layer.weight), tape.param(layer.bias)};
  return out;
}

BoundParams bind_frozen(Tape& tape, const MlpParams& params) {
  BoundParams out;
  for (const auto& [name, layer] : params.layers()) {
    out[name] = {tape.constant(layer.weight.value.matrix()), tape.constant(layer.bias.value.matrix())};
  }
  return out;
}

namespace {

const LayerVars& layer(const BoundParams& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw DomainError("model parameters: no layer named '" + name + "'");
  return it->second;
}

Var dense(const BoundParams& params, const std::string& name, Var x) {
  const LayerVars& l = layer(params, name);
  return add_bias(matmul(x, l.weight), l.bias);
}

Var dense_tanh(const BoundParams& params, const std::string& name, Var x) {
  return tanh(dense(params, name, x));
}

Var concat_xy(Tape& tape, const Batch& batch) {
  Matrix xy(batch.points(), batch.x.cols() + batch.y.cols());
  xy << batch.x, batch.y;
  return tape.constant(std::move(xy));
}

Var column_to_width(Tape& tape, Var column, Eigen::Index width) {
  return matmul(column, tape.constant(Matrix::Ones(1, width)));
}

struct LgmHeadNodes {
  Var W;      // rows x dy*d
  Var b;      // rows x dy
  Var noise;  // rows x dy
};

LgmHeadNodes lgm_head_nodes(const BoundParams& params, const ModelConfig& config, Var x) {
  const Eigen::Index d = config.latent_dim, dy = config.dy;
  Var hidden = dense_tanh(params, "lgm.hidden", dense_tanh(params, "lgm.in", x));
  Var out = dense(params, "lgm.out", hidden);
  return {slice_cols(out, 0, dy * d), slice_cols(out, dy * d, dy),
          add_scalar(softplus(slice_cols(out, dy * d + dy, dy)), kVarianceFloor)};
}

std::atomic<bool> warned_remainder{false};

}  // namespace

Batch Batch::build(std::span<const ContextSet> contexts, int group_size, bool keep_partial) {
  if (group_size < 1) throw DomainError("Batch: group size must be >= 1");
  Batch b;
  b.tasks = static_cast<int>(contexts.size());
  Eigen::Index dx = -1, dy = -1, total = 0;
  std::vector<Eigen::Index> used(contexts.size());
  for (std::size_t t = 0; t < contexts.size(); ++t) {
    const auto& c = contexts[t];
    if (c.size() > 0) {
      if (dx >= 0 && (c.x.cols() != dx || c.y.cols() != dy)) throw ShapeError("Batch: contexts differ in dx/dy");
      dx = c.x.cols();
      dy = c.y.cols();
    }
    const Eigen::Index rem = c.size() % group_size;
    used[t] = keep_partial ? c.size() : c.size() - rem;
    if (rem != 0 && !keep_partial && !warned_remainder.exchange(true)) {
      spdlog::warn("context of {} points is not a multiple of group size {}; dropping the trailing {} point(s)",
                   c.size(), group_size, rem);
    }
    total += used[t];
  }
  b.x.resize(total, std::max<Eigen::Index>(dx, 1));
  b.y.resize(total, std::max<Eigen::Index>(dy, 1));
  b.groups_per_task.assign(contexts.size(), 0);
  b.points_per_task.assign(contexts.size(), 0);
  Eigen::Index row = 0;
  std::vector<Eigen::Index> order;
  for (std::size_t t = 0; t < contexts.size(); ++t) {
    const auto& c = contexts[t];
    // Points inside a group are laid out in lexicographic (x, y) order, which
    // makes the pooled group embedding bitwise invariant to permutations.
    order.resize(static_cast<std::size_t>(used[t]));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    if (group_size > 1) {
      auto key_less = [&c](Eigen::Index a, Eigen::Index b) {
        for (Eigen::Index k = 0; k < c.x.cols(); ++k) {
          if (c.x(a, k) != c.x(b, k)) return c.x(a, k) < c.x(b, k);
        }
        for (Eigen::Index k = 0; k < c.y.cols(); ++k) {
          if (c.y(a, k) != c.y(b, k)) return c.y(a, k) < c.y(b, k);
        }
        return false;
      };
      for (std::size_t g = 0; g < order.size(); g += static_cast<std::size_t>(group_size)) {
        const auto end = std::min(order.size(), g + static_cast<std::size_t>(group_size));
        std::sort(order.begin() + static_cast<std::ptrdiff_t>(g), order.begin() + static_cast<std::ptrdiff_t>(end),
                  key_less);
      }
    }
    for (Eigen::Index i = 0; i < used[t]; ++i, ++row) {
      if (i % group_size == 0) {
        b.group_task.push_back(static_cast<int>(t));
        ++b.groups_per_task[t];
        ++b.groups;
      }
      const Eigen::Index src = order[static_cast<std::size_t>(i)];
      b.x.row(row) = c.x.row(src);
      b.y.row(row) = c.y.row(src);
      b.point_task.push_back(static_cast<int>(t));
      b.point_group.push_back(b.groups - 1);
      ++b.points_per_task[t];
    }
  }
  return b;
}

PriorNodes prior_nodes(Tape& tape, const BoundParams& params, const ModelConfig& config) {
  if (config.learn_prior) {
    const LayerVars& p = layer(params, "prior");
    return {p.weight, softplus(p.bias)};
  }
  const Eigen::Index d = config.latent_dim;
  return {tape.constant(Matrix::Zero(1, d)), tape.constant(Matrix::Ones(1, d))};
}

PosteriorNodes posterior(Tape& tape, const BoundParams& params, const ModelConfig& config, const Batch& batch) {
  const Eigen::Index d = config.latent_dim;
  const Eigen::Index T = batch.tasks;
  if (batch.points() > 0 && (batch.x.cols() != config.dx || batch.y.cols() != config.dy)) {
    throw ShapeError("posterior: batch has dx=" + std::to_string(batch.x.cols()) + ", dy=" +
                     std::to_string(batch.y.cols()) + " but the model expects dx=" + std::to_string(config.dx) +
                     ", dy=" + std::to_string(config.dy));
  }

  switch (config.aggregator) {
    case AggregatorKind::brm: {
      const Eigen::Index G = batch.groups;
      PriorNodes prior = prior_nodes(tape, params, config);
      Var prec0 = reciprocal(prior.var);
      Var trunk = dense_tanh(params, "enc.in", concat_xy(tape, batch));
      Var pooled = batch.groups == batch.points() ? trunk : segment_mean(trunk, batch.point_group, G);
      Var out = dense(params, "enc.out", dense_tanh(params, "enc.hidden", pooled));
      Var f = slice_cols(out, 0, d);
      Var delta = softplus(slice_cols(out, d, d));
      Var precision = segment_sum(delta, batch.group_task, T) + broadcast_rows(prec0, T);
      Var weighted = segment_sum((delta + broadcast_rows(prec0, G)) * f, batch.group_task, T);
      Matrix surplus(T, 1);
      for (Eigen::Index t = 0; t < T; ++t) surplus(t, 0) = batch.groups_per_task[static_cast<std::size_t>(t)] - 1.0;
      Var correction = matmul(tape.constant(std::move(surplus)), prec0 * prior.mu);
      Var mu = (weighted - correction) / precision;
      Var var = clamp_min(reciprocal(precision), kVarianceFloor);
      return {mu, var, f, delta};
    }
    case AggregatorKind::np: {
      for (int n : batch.points_per_task) {
        if (n == 0) throw DomainError("np aggregation: mean pooling of an empty context is undefined");
      }
      Var trunk = dense_tanh(params, "enc.in", concat_xy(tape, batch));
      Var pooled = segment_mean(trunk, batch.point_task, T);
      Var out = dense(params, "enc.out", dense_tanh(params, "enc.hidden", pooled));
      return {slice_cols(out, 0, d), add_scalar(softplus(slice_cols(out, d, d)), kVarianceFloor), {}, {}};
    }
    case AggregatorKind::gqn: {
      if (batch.points() == 0) return {tape.constant(Matrix::Zero(T, d)), {}, {}, {}};
      Var trunk = dense_tanh(params, "enc.in", concat_xy(tape, batch));
      Var embed = dense(params, "enc.out", dense_tanh(params, "enc.hidden", trunk));
      return {segment_sum(embed, batch.point_task, T), {}, {}, {}};
    }
    case AggregatorKind::lgm: {
      if (batch.points() == 0) {
        return {tape.constant(Matrix::Zero(T, d)), tape.constant(Matrix::Ones(T, d)), {}, {}};
      }
      const Eigen::Index dy = config.dy;
      LgmHeadNodes heads = lgm_head_nodes(params, config, tape.constant(batch.x));
      Var y = tape.constant(batch.y);
      std::optional<Var> info, score;
      for (Eigen::Index k = 0; k < dy; ++k) {
        Var Wk = slice_cols(heads.W, k * d, d);
        Var inv_noise = reciprocal(slice_cols(heads.noise, k, 1));
        Var resid = slice_cols(y, k, 1) - slice_cols(heads.b, k, 1);
        Var info_k = square(Wk) * column_to_width(tape, inv_noise, d);
        Var score_k = Wk * column_to_width(tape, resid * inv_noise, d);
        info = info ? *info + info_k : info_k;
        score = score ? *score + score_k : score_k;
      }
      Var precision = add_scalar(segment_sum(*info, batch.point_task, T), 1.0);
      Var mu = segment_sum(*score, batch.point_task, T) / precision;
      return {mu, clamp_min(reciprocal(precision), kVarianceFloor), {}, {}};
    }
  }
  throw DomainError("posterior: unknown aggregator");
}

PredictiveNodes decode(Tape& /*tape*/, const BoundParams& params, const ModelConfig& config, Var x, Var h) {
  const Eigen::Index d = config.latent_dim, dy = config.dy;
  if (x.cols() != config.dx || h.cols() != d || x.rows() != h.rows()) {
    throw ShapeError("decode: x is [" + std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + "], h is [" +
                     std::to_string(h.rows()) + ", " + std::to_string(h.cols()) + "]; expected dx=" +
                     std::to_string(config.dx) + ", d=" + std::to_string(d));
  }
  if (config.aggregator == AggregatorKind::lgm) {
    LgmHeadNodes heads = lgm_head_nodes(params, config, x);
    std::optional<Var> mean;
    for (Eigen::Index k = 0; k < dy; ++k) {
      Var mk = sum_cols(slice_cols(heads.W, k * d, d) * h) + slice_cols(heads.b, k, 1);
      mean = mean ? concat_cols(*mean, mk) : mk;
    }
    return {*mean, heads.noise};
  }
  Var hidden = dense_tanh(params, "dec.hidden", dense_tanh(params, "dec.in", concat_cols(x, h)));
  Var out = dense(params, "dec.out", hidden);
  return {slice_cols(out, 0, dy), add_scalar(softplus(slice_cols(out, dy, dy)), kVarianceFloor)};
}

Var gaussian_logpdf_rows(Tape& tape, Var y, const PredictiveNodes& predictive) {
  (void)tape;
  Var quad = square(y - predictive.mean) / predictive.var;
  Var logdet = log(scale(predictive.var, 2.0 * std::numbers::pi));
  return scale(sum_cols(logdet + quad), -0.5);
}

Var kl_rows(Var q_mu, Var q_var, const PriorNodes& p) {
  const Eigen::Index rows = q_mu.rows();
  Var p_var = broadcast_rows(p.var, rows);
  Var diff = q_mu - broadcast_rows(p.mu, rows);
  Var terms = log(p_var) - log(q_var) + (q_var + square(diff)) / p_var;
  return scale(add_scalar(sum_cols(terms), -static_cast<double>(q_mu.cols())), 0.5);
}

// ---------------------------------------------------------------------------

NaturalIncrement<double> encode_group(const Model& model, const ContextSet& group) {
  if (model.config.aggregator != AggregatorKind::brm) throw DomainError("encode_group: brm models only");
  if (group.size() == 0) throw DomainError("encode_group: empty group");
  if (group.size() > model.config.group_size) {
    throw DomainError("encode_group: group of " + std::to_string(group.size()) + " exceeds group size " +
                      std::to_string(model.config.group_size));
  }
  Tape tape;
  BoundParams params = bind_frozen(tape, model.params);
  const ContextSet contexts[] = {group};
  Batch batch = Batch::build(contexts, static_cast<int>(group.size()), true);
  PosteriorNodes post = posterior(tape, params, model.config, batch);
  return {post.f->value().row(0).transpose(), post.delta_prec->value().row(0).transpose()};
}

Predictive decode(const Model& model, const Vector& x, const Vector& h) {
  if (x.size() != model.config.dx || h.size() != model.config.latent_dim) {
    throw ShapeError("decode: got x of size " + std::to_string(x.size()) + " and h of size " +
                     std::to_string(h.size()) + "; expected " + std::to_string(model.config.dx) + " and " +
                     std::to_string(model.config.latent_dim));
  }
  Tape tape;
  BoundParams params = bind_frozen(tape, model.params);
  PredictiveNodes out = decode(tape, params, model.config, tape.constant(x.transpose()), tape.constant(h.transpose()));
  return {out.mean.value().row(0).transpose(), out.var.value().row(0).transpose()};
}

LinearGaussianObservation<double> lgm_heads(const Model& model, const Vector& x, const Vector& y) {
  if (model.config.aggregator != AggregatorKind::lgm) throw DomainError("lgm_heads: lgm models only");
  if (x.size() != model.config.dx || y.size() != model.config.dy) throw ShapeError("lgm_heads: x/y size mismatch");
  Tape tape;
  BoundParams params = bind_frozen(tape, model.params);
  LgmHeadNodes heads = lgm_head_nodes(params, model.config, tape.constant(x.transpose()));
  const Eigen::Index d = model.config.latent_dim, dy = model.config.dy;
  LinearGaussianObservation<double> obs;
  obs.W.resize(dy, d);
  for (Eigen::Index k = 0; k < dy; ++k) obs.W.row(k) = heads.W.value().block(0, k * d, 1, d);
  obs.b = heads.b.value().row(0).transpose();
  obs.noise_var = heads.noise.value().row(0).transpose();
  obs.y = y;
  return obs;
}

NaturalIncrement<double> lgm_group_realization(std::span<const LinearGaussianObservation<double>> group,
                                               const GaussianBelief<double>& prior) {
  prior.validate();
  const Eigen::Index d = prior.dim();
  Vector delta = Vector::Zero(d);
  Vector score = Vector::Zero(d);
  for (const auto& obs : group) {
    if (obs.W.cols() != d || obs.b.size() != obs.W.rows() || obs.noise_var.size() != obs.W.rows() ||
        obs.y.size() != obs.W.rows()) {
      throw ShapeError("lgm_realization: observation dimensions do not match latent dim " + std::to_string(d));
    }
    for (Eigen::Index k = 0; k < obs.noise_var.size(); ++k) {
      if (!(obs.noise_var[k] > 0.0)) throw DomainError("lgm_realization: noise variance must be positive");
    }
    const Vector inv_noise = obs.noise_var.cwiseInverse();
    delta += (obs.W.array().square().colwise() * inv_noise.array()).colwise().sum().transpose().matrix();
    score += obs.W.transpose() * (obs.y - obs.b).cwiseProduct(inv_noise);
  }
  const Vector prec0 = prior.precision();
  return {(score + prec0.cwiseProduct(prior.mu)).cwiseQuotient(prec0 + delta), delta};
}

NaturalIncrement<double> lgm_realization(const LinearGaussianObservation<double>& obs,
                                         const GaussianBelief<double>& prior) {
  return lgm_group_realization(std::span<const LinearGaussianObservation<double>>(&obs, 1), prior);
}

}  // namespace brm

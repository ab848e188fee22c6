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

// Closed-form posterior constructions over the task latent h and the
// diagonal-Gaussian belief arithmetic they rely on. Everything here is a pure
// function templated on the scalar type; sums run in input index order.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "brm/errors.hpp"

namespace brm {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Lower bound applied to every aggregated variance.
inline constexpr double kVarianceFloor = 1e-6;

/// Diagonal Gaussian N(mu, diag(var)).
template <typename Scalar = double>
struct GaussianBelief {
  VectorX<Scalar> mu;
  VectorX<Scalar> var;

  Eigen::Index dim() const { return mu.size(); }

  static GaussianBelief standard(Eigen::Index d) {
    return {VectorX<Scalar>::Zero(d), VectorX<Scalar>::Ones(d)};
  }

  /// Throws DomainError unless shapes agree and var is finite and > 0.
  void validate() const {
    if (mu.size() != var.size()) {
      throw ShapeError("GaussianBelief: mu has " + std::to_string(mu.size()) + " entries, var has " +
                       std::to_string(var.size()));
    }
    for (Eigen::Index i = 0; i < var.size(); ++i) {
      if (!(var[i] > Scalar(0)) || !std::isfinite(static_cast<double>(var[i]))) {
        throw DomainError("GaussianBelief: variance must be positive and finite");
      }
    }
  }

  VectorX<Scalar> precision() const { return var.cwiseInverse(); }
};

/// One context group's contribution: location proposal f and nonnegative
/// precision increment, so that the group posterior has precision
/// prior_precision + delta_prec.
template <typename Scalar = double>
struct NaturalIncrement {
  VectorX<Scalar> f;
  VectorX<Scalar> delta_prec;
};

/// Degenerate point-mass posterior.
template <typename Scalar = double>
struct DiracBelief {
  VectorX<Scalar> point;
};

/// One observation of a linear-Gaussian model y ~ N(W h + b, diag(noise_var)).
template <typename Scalar = double>
struct LinearGaussianObservation {
  MatrixX<Scalar> W;  // dy x d
  VectorX<Scalar> b;
  VectorX<Scalar> noise_var;
  VectorX<Scalar> y;
};

namespace detail {

inline void require_dim(const char* op, Eigen::Index got, Eigen::Index want) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": dimension " + std::to_string(got) + " does not match " +
                     std::to_string(want));
  }
}

template <typename Scalar>
void require_positive(const char* op, const VectorX<Scalar>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!(v[i] > Scalar(0))) throw DomainError(std::string(op) + ": variance must be positive");
  }
}

template <typename Scalar>
void require_nonnegative(const char* op, const VectorX<Scalar>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!(v[i] >= Scalar(0))) throw DomainError(std::string(op) + ": precision increments must be >= 0");
  }
}

}  // namespace detail

/// Precision-weighted, prior-corrected product of group posteriors:
///   prec = prec0 + sum_m delta_m
///   mu   = (sum_m (prec0 + delta_m) f_m - (M - 1) prec0 mu0) / prec
/// An empty list returns the prior unchanged.
template <typename Scalar>
GaussianBelief<Scalar> aggregate_brm(std::span<const NaturalIncrement<Scalar>> increments,
                                     const GaussianBelief<Scalar>& prior) {
  prior.validate();
  if (increments.empty()) return prior;
  const Eigen::Index d = prior.dim();
  const VectorX<Scalar> prec0 = prior.precision();
  VectorX<Scalar> precision = prec0;
  VectorX<Scalar> weighted = VectorX<Scalar>::Zero(d);
  for (const auto& inc : increments) {
    detail::require_dim("aggregate_brm", inc.f.size(), d);
    detail::require_dim("aggregate_brm", inc.delta_prec.size(), d);
    detail::require_nonnegative("aggregate_brm", inc.delta_prec);
    precision += inc.delta_prec;
    weighted += (prec0 + inc.delta_prec).cwiseProduct(inc.f);
  }
  const Scalar surplus = static_cast<Scalar>(increments.size()) - Scalar(1);
  weighted -= surplus * prec0.cwiseProduct(prior.mu);
  GaussianBelief<Scalar> out;
  out.mu = weighted.cwiseQuotient(precision);
  out.var = precision.cwiseInverse().cwiseMax(Scalar(kVarianceFloor));
  return out;
}

/// Conjugate update of N(0, I) under linear-Gaussian observations, with the
/// precision kept diagonal:
///   prec = 1 + sum_n diag(W^T G^-1 W),  mu = sum_n W^T G^-1 (y - b) / prec.
template <typename Scalar>
GaussianBelief<Scalar> aggregate_lgm(std::span<const LinearGaussianObservation<Scalar>> points,
                                     Eigen::Index latent_dim) {
  VectorX<Scalar> precision = VectorX<Scalar>::Ones(latent_dim);
  VectorX<Scalar> weighted = VectorX<Scalar>::Zero(latent_dim);
  for (const auto& p : points) {
    detail::require_dim("aggregate_lgm", p.W.cols(), latent_dim);
    detail::require_dim("aggregate_lgm", p.b.size(), p.W.rows());
    detail::require_dim("aggregate_lgm", p.noise_var.size(), p.W.rows());
    detail::require_dim("aggregate_lgm", p.y.size(), p.W.rows());
    detail::require_positive("aggregate_lgm", p.noise_var);
    const VectorX<Scalar> inv_noise = p.noise_var.cwiseInverse();
    precision += (p.W.array().square().colwise() * inv_noise.array()).colwise().sum().transpose().matrix();
    weighted += p.W.transpose() * (p.y - p.b).cwiseProduct(inv_noise);
  }
  GaussianBelief<Scalar> out;
  out.mu = weighted.cwiseQuotient(precision);
  out.var = precision.cwiseInverse().cwiseMax(Scalar(kVarianceFloor));
  return out;
}

/// Unnormalized sum of per-point embeddings.
template <typename Scalar>
DiracBelief<Scalar> aggregate_gqn(std::span<const VectorX<Scalar>> embeddings, Eigen::Index latent_dim) {
  VectorX<Scalar> point = VectorX<Scalar>::Zero(latent_dim);
  for (const auto& e : embeddings) {
    detail::require_dim("aggregate_gqn", e.size(), latent_dim);
    point += e;
  }
  return {point};
}

/// Mean-pool the embeddings, then map through the location and raw-variance
/// heads: mu = head_f(pool), var = softplus(head_g(pool)) + floor.
template <typename Scalar>
GaussianBelief<Scalar> aggregate_np(std::span<const VectorX<Scalar>> embeddings,
                                    const std::function<VectorX<Scalar>(const VectorX<Scalar>&)>& head_f,
                                    const std::function<VectorX<Scalar>(const VectorX<Scalar>&)>& head_g) {
  if (embeddings.empty()) throw DomainError("aggregate_np: mean pooling of an empty context is undefined");
  VectorX<Scalar> pooled = VectorX<Scalar>::Zero(embeddings.front().size());
  for (const auto& e : embeddings) detail::require_dim("aggregate_np", e.size(), pooled.size());
  // Accumulate in lexicographic order so the pooled sum is bitwise
  // independent of the input order.
  std::vector<const VectorX<Scalar>*> order;
  for (const auto& e : embeddings) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const VectorX<Scalar>* a, const VectorX<Scalar>* b) {
    return std::lexicographical_compare(a->begin(), a->end(), b->begin(), b->end());
  });
  for (const auto* e : order) pooled += *e;
  pooled /= static_cast<Scalar>(embeddings.size());
  GaussianBelief<Scalar> out;
  out.mu = head_f(pooled);
  const VectorX<Scalar> raw = head_g(pooled);
  detail::require_dim("aggregate_np", raw.size(), out.mu.size());
  out.var = raw.unaryExpr([](Scalar x) {
    using std::exp;
    using std::log1p;
    const Scalar sp = x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
    return sp + Scalar(kVarianceFloor);
  });
  return out;
}

/// KL(q || p) between diagonal Gaussians.
template <typename Scalar>
Scalar kl_diag(const GaussianBelief<Scalar>& q, const GaussianBelief<Scalar>& p) {
  detail::require_dim("kl_diag", q.dim(), p.dim());
  detail::require_dim("kl_diag", q.var.size(), p.var.size());
  detail::require_positive("kl_diag", q.var);
  detail::require_positive("kl_diag", p.var);
  Scalar total(0);
  for (Eigen::Index i = 0; i < q.dim(); ++i) {
    using std::log;
    const Scalar diff = q.mu[i] - p.mu[i];
    total += log(p.var[i] / q.var[i]) + (q.var[i] + diff * diff) / p.var[i] - Scalar(1);
  }
  return total / Scalar(2);
}

/// h = mu + sqrt(var) * noise, with noise drawn by the caller.
template <typename Scalar>
VectorX<Scalar> sample_reparam(const GaussianBelief<Scalar>& belief, const VectorX<Scalar>& noise) {
  detail::require_dim("sample_reparam", noise.size(), belief.dim());
  return belief.mu + belief.var.cwiseSqrt().cwiseProduct(noise);
}

/// Sum over coordinates of log N(value_i; mean_i, var_i).
template <typename Scalar>
Scalar gaussian_logpdf(const VectorX<Scalar>& value, const VectorX<Scalar>& mean, const VectorX<Scalar>& var) {
  detail::require_dim("gaussian_logpdf", mean.size(), value.size());
  detail::require_dim("gaussian_logpdf", var.size(), value.size());
  detail::require_positive("gaussian_logpdf", var);
  Scalar total(0);
  for (Eigen::Index i = 0; i < value.size(); ++i) {
    using std::log;
    const Scalar diff = value[i] - mean[i];
    total -= (log(Scalar(2) * Scalar(std::numbers::pi) * var[i]) + diff * diff / var[i]) / Scalar(2);
  }
  return total;
}

}  // namespace brm

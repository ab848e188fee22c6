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

// Dense row-major tensors, a reverse-mode tape over them, an MLP parameter
// store with Adam, and the flat-binary parameter checkpoint format.
//
// Every tape value is a 2-D row-major Eigen matrix. Rank-0 and rank-1
// tensors are viewed as 1x1 and 1xn matrices respectively. Minibatches are
// laid out one row per point; per-task and per-group reductions go through
// segment_sum / segment_mean with an explicit row -> segment index.

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace brm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;

  /// Checked construction: the element count must match the shape and every
  /// entry must be finite. Ranks above 2 are rejected.
  Tensor(Shape shape, std::span<const double> data);

  /// Rank-2 tensor wrapping a matrix (checked).
  explicit Tensor(Matrix values);

  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }

  const Matrix& matrix() const noexcept { return values_; }
  Matrix& matrix() noexcept { return values_; }

  std::span<const double> data() const noexcept { return {values_.data(), size()}; }
  std::span<double> data() noexcept { return {values_.data(), size()}; }

  /// Bitwise equality of shape and data.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  Matrix values_;
};

// ---------------------------------------------------------------------------
// Parameter store

struct Param {
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;

  explicit Param(Tensor initial = {});
};

struct Layer {
  Param weight;
  Param bias;
};

/// Named layers of an MLP, each holding a weight and a bias. The map is
/// ordered, so iteration (and therefore checkpoint layout and optimizer
/// traversal) is deterministic.
class MlpParams {
 public:
  /// Adds a dense layer computing x * W + b with W: [in, out] drawn from
  /// U(+-sqrt(6 / (in + out))) and b = 0.
  Layer& add_linear(const std::string& name, std::size_t in, std::size_t out,
                    std::mt19937_64& rng);
  Layer& add_layer(const std::string& name, Tensor weight, Tensor bias);

  Layer& layer(const std::string& name);
  const Layer& layer(const std::string& name) const;
  bool contains(const std::string& name) const { return layers_.count(name) != 0; }

  std::map<std::string, Layer>& layers() noexcept { return layers_; }
  const std::map<std::string, Layer>& layers() const noexcept { return layers_; }

  std::int64_t step() const noexcept { return step_; }
  void set_step(std::int64_t step);

  void zero_grad();
  std::size_t parameter_count() const;

  /// Sum of squared gradient entries; used for diagnostics.
  double grad_norm_squared() const;

 private:
  std::map<std::string, Layer> layers_;
  std::int64_t step_ = 0;
};

bool bitwise_equal(const MlpParams& a, const MlpParams& b);

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update over every parameter, followed by zeroing the
/// gradients and incrementing the step counter.
void adam_step(MlpParams& params, const AdamConfig& config);

// ---------------------------------------------------------------------------
// Reverse-mode tape

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf whose gradient is read back with grad().
  Var variable(Matrix value);
  /// Leaf bound to a parameter; backward() adds into param.grad.
  Var param(Param& param);

  /// Reverse sweep from a 1x1 root. Gradients are accumulated into every
  /// bound parameter; unreachable parameters are left untouched.
  void backward(Var root);

  /// Gradient of the last backward() root w.r.t. v (zeros if unreachable).
  Matrix grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Records an op result. The backward closure is kept only when at least
  /// one input requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Adds delta into the pending gradient of node id (no-op for nodes that
  /// do not require gradients).
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = delta;
    } else {
      node.grad += delta;
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Matrix* sink = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All inputs must live on the same tape; shape mismatches
// raise ShapeError naming both shapes.

Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator/(Var a, Var b);  // elementwise
Var operator-(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

/// a: [n, c], bias: [1, c].
Var add_bias(Var a, Var bias);
/// row: [1, c] -> [n, c].
Var broadcast_rows(Var row, Eigen::Index n);

Var square(Var a);
Var sqrt(Var a);
Var reciprocal(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
/// max(a, floor) elementwise; the gradient is passed where a > floor.
Var clamp_min(Var a, double floor);

Var sum(Var a);   // -> [1, 1]
Var mean(Var a);  // -> [1, 1]
/// Row sums: [n, c] -> [n, 1].
Var sum_cols(Var a);

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
Var concat_cols(Var a, Var b);

/// out[s] = sum of rows r with segment[r] == s, accumulated in row order.
Var segment_sum(Var a, std::span<const int> segment, Eigen::Index segments);
/// Segment sum divided by the row count of each segment. Empty segments
/// produce zero rows.
Var segment_mean(Var a, std::span<const int> segment, Eigen::Index segments);
/// out[i] = a[index[i]].
Var gather_rows(Var a, std::span<const int> index);

/// x * W + b for a layer of the parameter store.
Var linear(Tape& tape, Layer& layer, Var x);

/// Scalar softplus and its inverse (used for initialization).
double softplus(double x);
double softplus_inverse(double y);

// ---------------------------------------------------------------------------
// Checkpoints: `<stem>.json` manifest + `<stem>.bin` flat little-endian
// float64 data. Adam moments are stored alongside each parameter under the
// suffixes ":adam_m" and ":adam_v".

struct Checkpoint {
  MlpParams params;
  nlohmann::json header;
};

void write_checkpoint(const MlpParams& params, const std::filesystem::path& stem,
                      const nlohmann::json& header = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& stem);

}  // namespace brm

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

#include "brm/diffmath.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "brm/errors.hpp"

namespace brm {

namespace {

std::string dims(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + ", " + std::to_string(m.cols()) + "]";
}

[[noreturn]] void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + dims(a) + " and " + dims(b));
}

void require_same_shape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": operands on different tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a.value(), b.value());
}

Eigen::Index matrix_rows(const Shape& shape) {
  return shape.size() == 2 ? static_cast<Eigen::Index>(shape[0]) : 1;
}

Eigen::Index matrix_cols(const Shape& shape) {
  if (shape.empty()) return 1;
  return static_cast<Eigen::Index>(shape.back());
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

void check_finite(const Matrix& m) {
  if (!m.allFinite()) throw DomainError("Tensor: non-finite entry");
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::span<const double> data) : shape_(std::move(shape)) {
  if (shape_.size() > 2) throw ShapeError("Tensor: rank > 2 unsupported, got " + shape_string(shape_));
  if (element_count(shape_) != data.size()) {
    throw ShapeError("Tensor: shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  values_.resize(matrix_rows(shape_), matrix_cols(shape_));
  std::copy(data.begin(), data.end(), values_.data());
  check_finite(values_);
}

Tensor::Tensor(Matrix values)
    : shape_{static_cast<std::size_t>(values.rows()), static_cast<std::size_t>(values.cols())},
      values_(std::move(values)) {
  check_finite(values_);
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> data(element_count(shape), 0.0);
  return Tensor(std::move(shape), data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::span<const double>(&value, 1)); }

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  return std::memcmp(a.values_.data(), b.values_.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Parameter store

Param::Param(Tensor initial)
    : value(std::move(initial)),
      grad(Tensor::zeros(value.shape())),
      adam_m(Tensor::zeros(value.shape())),
      adam_v(Tensor::zeros(value.shape())) {}

Layer& MlpParams::add_linear(const std::string& name, std::size_t in, std::size_t out,
                             std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Matrix w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng);
  return add_layer(name, Tensor(std::move(w)), Tensor::zeros({out}));
}

Layer& MlpParams::add_layer(const std::string& name, Tensor weight, Tensor bias) {
  if (layers_.count(name)) throw DomainError("MlpParams: duplicate layer '" + name + "'");
  auto [it, inserted] = layers_.emplace(name, Layer{Param(std::move(weight)), Param(std::move(bias))});
  return it->second;
}

Layer& MlpParams::layer(const std::string& name) {
  auto it = layers_.find(name);
  if (it == layers_.end()) throw DomainError("MlpParams: no layer named '" + name + "'");
  return it->second;
}

const Layer& MlpParams::layer(const std::string& name) const {
  auto it = layers_.find(name);
  if (it == layers_.end()) throw DomainError("MlpParams: no layer named '" + name + "'");
  return it->second;
}

void MlpParams::set_step(std::int64_t step) {
  if (step < 0) throw DomainError("MlpParams: negative step counter");
  step_ = step;
}

void MlpParams::zero_grad() {
  for (auto& [name, layer] : layers_) {
    layer.weight.grad.matrix().setZero();
    layer.bias.grad.matrix().setZero();
  }
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, layer] : layers_) n += layer.weight.value.size() + layer.bias.value.size();
  return n;
}

double MlpParams::grad_norm_squared() const {
  double total = 0.0;
  for (const auto& [name, layer] : layers_) {
    total += layer.weight.grad.matrix().squaredNorm() + layer.bias.grad.matrix().squaredNorm();
  }
  return total;
}

bool bitwise_equal(const MlpParams& a, const MlpParams& b) {
  if (a.step() != b.step() || a.layers().size() != b.layers().size()) return false;
  auto same = [](const Param& x, const Param& y) {
    return x.value == y.value && x.adam_m == y.adam_m && x.adam_v == y.adam_v;
  };
  for (auto ia = a.layers().begin(), ib = b.layers().begin(); ia != a.layers().end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (!same(ia->second.weight, ib->second.weight) || !same(ia->second.bias, ib->second.bias)) return false;
  }
  return true;
}

void adam_step(MlpParams& params, const AdamConfig& config) {
  if (!(config.lr > 0.0)) throw DomainError("adam_step: learning rate must be positive");
  const std::int64_t t = params.step() + 1;
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  auto update = [&](Param& p) {
    auto g = p.grad.matrix().array();
    auto m = p.adam_m.matrix().array();
    auto v = p.adam_v.matrix().array();
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.square();
    p.value.matrix().array() -=
        config.lr * (m / correction1) / ((v / correction2).sqrt() + config.eps);
    p.grad.matrix().setZero();
  };
  for (auto& [name, layer] : params.layers()) {
    update(layer.weight);
    update(layer.bias);
  }
  params.set_step(t);
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Param& param) {
  nodes_.push_back(Node{param.value.matrix(), {}, {}, &param.grad.matrix(), true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ShapeError("Tape: operand recorded on a different tape");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw ShapeError("backward: root on a different tape");
  const Matrix& rv = root.value();
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ShapeError("backward: root must be scalar, got " + dims(rv));
  }
  if (!rv.allFinite()) throw DomainError("backward: non-finite root value");
  for (auto& node : nodes_) node.grad.resize(0, 0);
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.sink) *node.sink += node.grad;
  }
}

Matrix Tape::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ShapeError("matmul: operands on different tapes");
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.value(), b.value());
  Matrix out = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var operator+(Var a, Var b) {
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var operator-(Var a, Var b) {
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var operator*(Var a, Var b) {
  require_same_shape("mul", a, b);
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var operator/(Var a, Var b) {
  require_same_shape("div", a, b);
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseQuotient(b.value());
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    const Matrix& bv = t.value(ib);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
    if (t.requires_grad(ib)) {
      t.accumulate(ib, (-g.array() * t.value(ia).array() / bv.array().square()).matrix());
    }
  });
}

Var operator-(Var a) { return scale(a, -1.0); }

Var scale(Var a, double factor) {
  const auto ia = a.id();
  return a.tape().record(a.value() * factor, {a},
                         [ia, factor](Tape& t, const Matrix& g) { t.accumulate(ia, g * factor); });
}

Var add_scalar(Var a, double offset) {
  const auto ia = a.id();
  Matrix out = a.value().array() + offset;
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

Var add_bias(Var a, Var bias) {
  if (&a.tape() != &bias.tape()) throw ShapeError("add_bias: operands on different tapes");
  if (bias.rows() != 1 || bias.cols() != a.cols()) shape_mismatch("add_bias", a.value(), bias.value());
  Matrix out = a.value().rowwise() + bias.value().row(0);
  const auto ia = a.id(), ib = bias.id();
  return a.tape().record(std::move(out), {a, bias}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index n) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row, got " + dims(row.value()));
  Matrix out = row.value().replicate(n, 1);
  const auto ir = row.id();
  return row.tape().record(std::move(out), {row},
                           [ir](Tape& t, const Matrix& g) { t.accumulate(ir, g.colwise().sum()); });
}

Var square(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().square();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (2.0 * g.array() * t.value(ia).array()).matrix());
  });
}

Var sqrt(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().sqrt();
  Matrix cached = out;
  return a.tape().record(std::move(out), {a}, [ia, cached = std::move(cached)](Tape& t, const Matrix& g) {
    t.accumulate(ia, (0.5 * g.array() / cached.array()).matrix());
  });
}

Var reciprocal(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().inverse();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (-g.array() / t.value(ia).array().square()).matrix());
  });
}

Var tanh(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().tanh();
  Matrix cached = out;
  return a.tape().record(std::move(out), {a}, [ia, cached = std::move(cached)](Tape& t, const Matrix& g) {
    t.accumulate(ia, (g.array() * (1.0 - cached.array().square())).matrix());
  });
}

Var relu(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0).matrix());
  });
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be positive");
  // log(exp(y) - 1) = y + log(1 - exp(-y))
  return y + std::log(-std::expm1(-y));
}

Var softplus(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return softplus(x); });
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix sig = t.value(ia).unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    t.accumulate(ia, g.cwiseProduct(sig));
  });
}

Var exp(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().exp();
  Matrix cached = out;
  return a.tape().record(std::move(out), {a}, [ia, cached = std::move(cached)](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(cached));
  });
}

Var log(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().log();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

Var clamp_min(Var a, double floor) {
  const auto ia = a.id();
  Matrix out = a.value().cwiseMax(floor);
  return a.tape().record(std::move(out), {a}, [ia, floor](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > floor).select(g, 0.0).matrix());
  });
}

Var sum(Var a) {
  const auto ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum_cols(Var a) {
  const auto ia = a.id();
  const Eigen::Index c = a.cols();
  Matrix out = a.value().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + dims(a.value()));
  }
  const auto ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out = a.value().middleCols(begin, count);
  return a.tape().record(std::move(out), {a}, [ia, r, c, begin, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleCols(begin, count) = g;
    t.accumulate(ia, full);
  });
}

Var concat_cols(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ShapeError("concat_cols: operands on different tapes");
  if (a.rows() != b.rows()) shape_mismatch("concat_cols", a.value(), b.value());
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.leftCols(ca));
    if (t.requires_grad(ib)) t.accumulate(ib, g.rightCols(cb));
  });
}

namespace {

void check_index(const char* op, std::span<const int> index, Eigen::Index rows, Eigen::Index limit) {
  if (static_cast<Eigen::Index>(index.size()) != rows) {
    throw ShapeError(std::string(op) + ": index has " + std::to_string(index.size()) +
                     " entries for " + std::to_string(rows) + " rows");
  }
  for (int s : index) {
    if (s < 0 || s >= limit) throw ShapeError(std::string(op) + ": index " + std::to_string(s) + " out of range");
  }
}

}  // namespace

Var segment_sum(Var a, std::span<const int> segment, Eigen::Index segments) {
  check_index("segment_sum", segment, a.rows(), segments);
  Matrix out = Matrix::Zero(segments, a.cols());
  const Matrix& av = a.value();
  for (Eigen::Index r = 0; r < av.rows(); ++r) out.row(segment[r]) += av.row(r);
  std::vector<int> seg(segment.begin(), segment.end());
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, seg = std::move(seg)](Tape& t, const Matrix& g) {
    Matrix ga(static_cast<Eigen::Index>(seg.size()), g.cols());
    for (std::size_t r = 0; r < seg.size(); ++r) ga.row(static_cast<Eigen::Index>(r)) = g.row(seg[r]);
    t.accumulate(ia, ga);
  });
}

Var segment_mean(Var a, std::span<const int> segment, Eigen::Index segments) {
  check_index("segment_mean", segment, a.rows(), segments);
  std::vector<double> counts(static_cast<std::size_t>(segments), 0.0);
  for (int s : segment) counts[static_cast<std::size_t>(s)] += 1.0;
  Matrix inv(static_cast<Eigen::Index>(segments), 1);
  for (Eigen::Index s = 0; s < segments; ++s) {
    inv(s, 0) = counts[static_cast<std::size_t>(s)] > 0 ? 1.0 / counts[static_cast<std::size_t>(s)] : 0.0;
  }
  Var total = segment_sum(a, segment, segments);
  Var weights = a.tape().constant(inv.replicate(1, a.cols()));
  return total * weights;
}

Var gather_rows(Var a, std::span<const int> index) {
  for (int i : index) {
    if (i < 0 || i >= a.rows()) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  const Matrix& av = a.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t r = 0; r < index.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = av.row(index[r]);
  std::vector<int> idx(index.begin(), index.end());
  const auto ia = a.id();
  const Eigen::Index rows = av.rows();
  return a.tape().record(std::move(out), {a}, [ia, rows, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(rows, g.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(ia, ga);
  });
}

Var linear(Tape& tape, Layer& layer, Var x) {
  Var w = tape.param(layer.weight);
  Var b = tape.param(layer.bias);
  // Rank-1 bias is stored as 1 x out.
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void append_le(std::string& buffer, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int k = 0; k < 8; ++k) buffer.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
}

double read_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
  return std::bit_cast<double>(bits);
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

void write_checkpoint(const MlpParams& params, const std::filesystem::path& stem,
                      const nlohmann::json& header) {
  std::string data;
  nlohmann::json tensors = nlohmann::json::array();
  auto emit = [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", data.size()}, {"count", t.size()}});
    for (double v : t.data()) append_le(data, v);
  };
  for (const auto& [name, layer] : params.layers()) {
    for (const auto& [suffix, p] : {std::pair<const char*, const Param*>{".weight", &layer.weight},
                                    std::pair<const char*, const Param*>{".bias", &layer.bias}}) {
      emit(name + suffix, p->value);
      emit(name + suffix + ":adam_m", p->adam_m);
      emit(name + suffix + ":adam_v", p->adam_v);
    }
  }
  const auto bin_path = with_suffix(stem, ".bin");
  nlohmann::json manifest = {{"format", "brm-params-v1"},
                             {"data_file", bin_path.filename().string()},
                             {"step", params.step()},
                             {"header", header},
                             {"tensors", tensors}};
  {
    std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("write_checkpoint: cannot write " + bin_path.string());
  }
  std::ofstream out(with_suffix(stem, ".json"), std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("write_checkpoint: cannot write manifest for " + stem.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& stem) {
  const auto manifest_path = with_suffix(stem, ".json");
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("read_checkpoint: cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what(), 1, e.byte);
  }
  if (manifest.value("format", "") != "brm-params-v1") {
    throw ParseError("checkpoint manifest: unknown format", 1, 0);
  }
  const auto bin_path = manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("read_checkpoint: cannot open " + bin_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::map<std::string, Tensor> loaded;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset + 8 * count > bytes.size()) {
      throw ParseError("checkpoint data: tensor '" + name + "' extends past end of file", 1, offset);
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = read_le(bytes.data() + offset + 8 * i);
    loaded.emplace(name, Tensor(shape, values));
  }

  Checkpoint result;
  auto take = [&](const std::string& key) {
    auto it = loaded.find(key);
    if (it == loaded.end()) throw ParseError("checkpoint data: missing tensor '" + key + "'", 1, 0);
    return it->second;
  };
  for (const auto& [name, tensor] : loaded) {
    const auto dot = name.rfind(".weight");
    if (dot == std::string::npos || dot + 7 != name.size()) continue;
    const auto layer_name = name.substr(0, dot);
    Layer& layer = result.params.add_layer(layer_name, tensor, take(layer_name + ".bias"));
    layer.weight.adam_m = take(layer_name + ".weight:adam_m");
    layer.weight.adam_v = take(layer_name + ".weight:adam_v");
    layer.bias.adam_m = take(layer_name + ".bias:adam_m");
    layer.bias.adam_v = take(layer_name + ".bias:adam_v");
  }
  result.params.set_step(manifest.at("step").get<std::int64_t>());
  result.header = manifest.value("header", nlohmann::json::object());
  return result;
}

}  // namespace brm

// SPDX-License-Identifier: Apache-2.0

#include "idpo/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

namespace idpo {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

namespace {

thread_local bool t_grad_enabled = true;

Tensor make_output(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::move(backward_fn);
    Tape::active().record(node);
  }
  return Tensor(std::move(node));
}

Tensor make_output_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                     std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward_fn);
    Tape::active().record(node);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(fmt::format("{}: undefined tensor", op));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(
        fmt::format("{}: shape mismatch {} vs {}", op, shape_to_string(a.shape()), shape_to_string(b.shape())));
  }
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError(fmt::format("axis {} out of range for rank {}", axis, rank));
  return static_cast<std::size_t>(a);
}

// Elementwise unary op: forward value function and derivative expressed
// through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  require_defined(a, "unary");
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_output(a.shape(), std::move(out), {&a}, [deriv](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(x.data[i], self.data[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapes and handles

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError(fmt::format("zero-sized dimension in shape {}", shape_to_string(shape)));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError(
        fmt::format("shape {} needs {} values, got {}", shape_to_string(shape), shape_numel(shape), data.size()));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  if (node_->backward) throw AutodiffError("mutable_data on a recorded (non-leaf) tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError(fmt::format("item() on tensor of shape {}", shape_to_string(shape())));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  if (node_->backward) throw AutodiffError("set_requires_grad on a recorded (non-leaf) tensor");
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  require_defined(*this, "grad");
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  require_defined(*this, "clear_grad");
  node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return from_data(node_->shape, node_->data, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  require_defined(*this, "clone");
  return from_data(node_->shape, node_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::shared_ptr<TensorNode> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw AutodiffError("backward called twice without Tape::reset()");
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError(fmt::format("backward requires a scalar loss, got shape {}",
                                    loss.defined() ? shape_to_string(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) throw AutodiffError("backward on a loss that does not require grad");
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
  consumed_ = true;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_output(a.shape(), std::move(out), {&a, &b}, [](TensorNode& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_output(a.shape(), std::move(out), {&a, &b}, [](TensorNode& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_output(a.shape(), std::move(out), {&a, &b}, [](TensorNode& self) {
    TensorNode& l = *self.inputs[0];
    TensorNode& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = l.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * r.data[i];
    }
    if (r.requires_grad) {
      auto& g = r.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * l.data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_output(a.shape(), std::move(out), {&a, &b}, [](TensorNode& self) {
    TensorNode& l = *self.inputs[0];
    TensorNode& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = l.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / r.data[i];
    }
    if (r.requires_grad) {
      auto& g = r.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / r.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
  return unary(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor rsqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / std::sqrt(x); }, [](double, double y) { return -0.5 * y * y * y; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_output({}, {s}, {&a}, [](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_output({}, {s / n}, {&a}, [n](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    const double d = self.grad[0] / n;
    for (double& v : g) v += d;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto mismatch = [&] {
    return DimensionError(
        fmt::format("matmul: incompatible shapes {} and {}", shape_to_string(a.shape()), shape_to_string(b.shape())));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) throw mismatch();

  Shape out_shape = a.shape();
  out_shape.back() = n;

  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(rows * n);
    MutMap(out.data(), rows, n).noalias() = ConstMap(a.data().data(), rows, k) * ConstMap(b.data().data(), k, n);
    return make_output(std::move(out_shape), std::move(out), {&a, &b}, [rows, k, n](TensorNode& self) {
      TensorNode& l = *self.inputs[0];
      TensorNode& r = *self.inputs[1];
      ConstMap g(self.grad.data(), rows, n);
      if (l.requires_grad) MutMap(l.grad_buffer().data(), rows, k).noalias() += g * ConstMap(r.data.data(), k, n).transpose();
      if (r.requires_grad) MutMap(r.grad_buffer().data(), k, n).noalias() += ConstMap(l.data.data(), rows, k).transpose() * g;
    });
  }

  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) throw mismatch();
  const std::size_t batch = a.numel() / (m * k);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  }
  return make_output(std::move(out_shape), std::move(out), {&a, &b}, [batch, m, k, n](TensorNode& self) {
    TensorNode& l = *self.inputs[0];
    TensorNode& r = *self.inputs[1];
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap g(self.grad.data() + i * m * n, m, n);
      if (l.requires_grad) {
        MutMap(l.grad_buffer().data() + i * m * k, m, k).noalias() +=
            g * ConstMap(r.data.data() + i * k * n, k, n).transpose();
      }
      if (r.requires_grad) {
        MutMap(r.grad_buffer().data() + i * k * n, k, n).noalias() +=
            ConstMap(l.data.data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw DimensionError(fmt::format("linear: input {} incompatible with weight {}", shape_to_string(x.shape()),
                                     shape_to_string(weight.shape())));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  MutMap(out.data(), rows, out_dim).noalias() =
      ConstMap(x.data().data(), rows, in) * ConstMap(weight.data().data(), out_dim, in).transpose();
  return make_output(std::move(out_shape), std::move(out), {&x, &weight}, [rows, in, out_dim](TensorNode& self) {
    TensorNode& xs = *self.inputs[0];
    TensorNode& w = *self.inputs[1];
    ConstMap g(self.grad.data(), rows, out_dim);
    if (xs.requires_grad) MutMap(xs.grad_buffer().data(), rows, in).noalias() += g * ConstMap(w.data.data(), out_dim, in);
    if (w.requires_grad) {
      MutMap(w.grad_buffer().data(), out_dim, in).noalias() += g.transpose() * ConstMap(xs.data.data(), rows, in);
    }
  });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// perm[i] = flat input index for flat output index i.
std::vector<std::size_t> transpose_map(const Shape& in_shape, std::size_t ax0, std::size_t ax1) {
  Shape out_shape = in_shape;
  std::swap(out_shape[ax0], out_shape[ax1]);
  auto in_strides = strides_of(in_shape);
  std::swap(in_strides[ax0], in_strides[ax1]);
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(out_shape.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    map[i] = src;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      ++idx[d];
      src += in_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= in_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  require_defined(a, "transpose");
  const std::size_t ax0 = normalize_axis(axis0, a.rank()), ax1 = normalize_axis(axis1, a.rank());
  Shape out_shape = a.shape();
  std::swap(out_shape[ax0], out_shape[ax1]);
  auto map = std::make_shared<std::vector<std::size_t>>(transpose_map(a.shape(), ax0, ax1));
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*map)[i]];
  return make_output(std::move(out_shape), std::move(out), {&a}, [map](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError(
        fmt::format("reshape: cannot view {} as {}", shape_to_string(a.shape()), shape_to_string(shape)));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_output(std::move(shape), std::move(out), {&a}, [](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined(a, "slice");
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    throw DimensionError(fmt::format("slice [{}, {}) out of range for {}", begin, end, shape_to_string(a.shape())));
  }
  const std::size_t inner = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = end - begin;
  const auto in = a.data();
  std::vector<double> out(in.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                          in.begin() + static_cast<std::ptrdiff_t>(end * inner));
  const std::size_t offset = begin * inner;
  return make_output(std::move(out_shape), std::move(out), {&a}, [offset](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  if (out_shape.empty()) throw DimensionError("concat: scalar inputs");
  out_shape[0] = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    if (p.rank() != out_shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), out_shape.begin() + 1)) {
      throw DimensionError(fmt::format("concat: incompatible part shape {} (expected trailing dims of {})",
                                       shape_to_string(p.shape()), shape_to_string(parts.front().shape())));
    }
    out_shape[0] += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_output_n(std::move(out_shape), std::move(out), parts, [](TensorNode& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += in->data.size();
    }
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  require_defined(a, "gather");
  if (indices.empty()) throw DimensionError("gather: empty index list");
  const auto in = a.data();
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<double> out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= in.size()) {
      throw DimensionError(fmt::format("gather: index {} out of range for {}", (*idx)[i], shape_to_string(a.shape())));
    }
    out[i] = in[(*idx)[i]];
  }
  return make_output({idx->size()}, std::move(out), {&a}, [idx](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += self.grad[i];
  });
}

Tensor segment_sum(const Tensor& a, std::span<const std::size_t> segments, std::size_t n_segments) {
  require_defined(a, "segment_sum");
  if (a.rank() != 1 || segments.size() != a.numel() || n_segments == 0) {
    throw DimensionError(fmt::format("segment_sum: {} values with {} segment ids into {} segments",
                                     a.numel(), segments.size(), n_segments));
  }
  auto seg = std::make_shared<std::vector<std::size_t>>(segments.begin(), segments.end());
  std::vector<double> out(n_segments, 0.0);
  const auto in = a.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if ((*seg)[i] >= n_segments) throw DimensionError("segment_sum: segment id out of range");
    out[(*seg)[i]] += in[i];
  }
  return make_output({n_segments}, std::move(out), {&a}, [seg](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[(*seg)[i]];
  });
}

Tensor embedding(const Tensor& weight, std::span<const int> ids, Shape out_prefix) {
  require_defined(weight, "embedding");
  if (weight.rank() != 2) throw DimensionError("embedding: weight must be 2-D");
  if (shape_numel(out_prefix) != ids.size()) throw DimensionError("embedding: id count does not match output prefix");
  const std::size_t vocab = weight.dim(0), d = weight.dim(1);
  auto rows = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  const auto w = weight.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < rows->size(); ++i) {
    const int id = (*rows)[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range(fmt::format("embedding: token id {} outside vocabulary of {}", id, vocab));
    }
    std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(id * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  out_prefix.push_back(d);
  return make_output(std::move(out_prefix), std::move(out), {&weight}, [rows, d](TensorNode& self) {
    TensorNode& w = *self.inputs[0];
    if (!w.requires_grad) return;
    auto& g = w.grad_buffer();
    for (std::size_t i = 0; i < rows->size(); ++i) {
      const std::size_t base = static_cast<std::size_t>((*rows)[i]) * d;
      for (std::size_t j = 0; j < d; ++j) g[base + j] += self.grad[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Neural-net primitives

Tensor log_softmax(const Tensor& a) {
  require_defined(a, "log_softmax");
  if (a.rank() == 0) throw DimensionError("log_softmax: scalar input");
  const std::size_t v = a.dim(-1), rows = a.numel() / v;
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * v;
    double* y = out.data() + r * v;
    const double mx = *std::max_element(x, x + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) y[j] = x[j] - lse;
  }
  return make_output(a.shape(), std::move(out), {&a}, [rows, v](TensorNode& self) {
    TensorNode& x = *self.inputs[0];
    if (!x.requires_grad) return;
    auto& g = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = self.grad.data() + r * v;
      const double* y = self.data.data() + r * v;
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += gy[j];
      for (std::size_t j = 0; j < v; ++j) g[r * v + j] += gy[j] - std::exp(y[j]) * s;
    }
  });
}

namespace {

void softmax_backward_rows(TensorNode& self, std::size_t rows, std::size_t v) {
  TensorNode& x = *self.inputs[0];
  if (!x.requires_grad) return;
  auto& g = x.grad_buffer();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gy = self.grad.data() + r * v;
    const double* y = self.data.data() + r * v;
    double dot = 0.0;
    for (std::size_t j = 0; j < v; ++j) dot += gy[j] * y[j];
    for (std::size_t j = 0; j < v; ++j) g[r * v + j] += y[j] * (gy[j] - dot);
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  require_defined(a, "softmax");
  if (a.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t v = a.dim(-1), rows = a.numel() / v;
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * v;
    double* y = out.data() + r * v;
    const double mx = *std::max_element(x, x + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < v; ++j) y[j] /= s;
  }
  return make_output(a.shape(), std::move(out), {&a},
                     [rows, v](TensorNode& self) { softmax_backward_rows(self, rows, v); });
}

Tensor causal_softmax(const Tensor& scores, std::span<const std::uint8_t> key_valid) {
  require_defined(scores, "causal_softmax");
  if (scores.rank() != 4 || scores.dim(2) != scores.dim(3)) {
    throw DimensionError(fmt::format("causal_softmax: expected [B,H,T,T], got {}", shape_to_string(scores.shape())));
  }
  const std::size_t batch = scores.dim(0), heads = scores.dim(1), t_len = scores.dim(2);
  if (!key_valid.empty() && key_valid.size() != batch * t_len) {
    throw DimensionError("causal_softmax: key mask size does not match [B,T]");
  }
  const auto in = scores.data();
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* valid = key_valid.empty() ? nullptr : key_valid.data() + b * t_len;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t row = ((b * heads + h) * t_len + t) * t_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          if (!valid || valid[s]) mx = std::max(mx, in[row + s]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double total = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          if (!valid || valid[s]) total += (out[row + s] = std::exp(in[row + s] - mx));
        }
        for (std::size_t s = 0; s <= t; ++s) out[row + s] /= total;
      }
    }
  }
  const std::size_t rows = batch * heads * t_len;
  return make_output(scores.shape(), std::move(out), {&scores},
                     [rows, t_len](TensorNode& self) { softmax_backward_rows(self, rows, t_len); });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  require_defined(x, "rms_norm");
  require_defined(weight, "rms_norm");
  if (x.rank() == 0 || weight.rank() != 1 || weight.dim(0) != x.dim(-1)) {
    throw DimensionError(fmt::format("rms_norm: input {} incompatible with weight {}", shape_to_string(x.shape()),
                                     shape_to_string(weight.shape())));
  }
  const std::size_t d = x.dim(-1), rows = x.numel() / d;
  const auto in = x.data();
  const auto w = weight.data();
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv_rms)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * w[j];
  }
  return make_output(x.shape(), std::move(out), {&x, &weight}, [rows, d, inv_rms](TensorNode& self) {
    TensorNode& xs = *self.inputs[0];
    TensorNode& w = *self.inputs[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xs.data.data() + r * d;
      const double* g = self.grad.data() + r * d;
      const double inv = (*inv_rms)[r];
      if (xs.requires_grad) {
        auto& gx = xs.grad_buffer();
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[j] * w.data[j] * xr[j];
        const double coef = inv * inv * inv * dot / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * w.data[j] * g[j] - coef * xr[j];
      }
      if (w.requires_grad) {
        auto& gw = w.grad_buffer();
        for (std::size_t j = 0; j < d; ++j) gw[j] += g[j] * xr[j] * inv;
      }
    }
  });
}

Tensor rope(const Tensor& x, double theta) {
  require_defined(x, "rope");
  if (x.rank() != 4 || x.dim(3) % 2 != 0) {
    throw DimensionError(fmt::format("rope: expected [B,T,H,dh] with even dh, got {}", shape_to_string(x.shape())));
  }
  const std::size_t batch = x.dim(0), t_len = x.dim(1), heads = x.dim(2), dh = x.dim(3), half = dh / 2;
  auto cos_t = std::make_shared<std::vector<double>>(t_len * half);
  auto sin_t = std::make_shared<std::vector<double>>(t_len * half);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(t) * freq;
      (*cos_t)[t * half + i] = std::cos(angle);
      (*sin_t)[t * half + i] = std::sin(angle);
    }
  }
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = ((b * t_len + t) * heads + h) * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = (*cos_t)[t * half + i], s = (*sin_t)[t * half + i];
          const double x1 = in[base + i], x2 = in[base + half + i];
          out[base + i] = x1 * c - x2 * s;
          out[base + half + i] = x1 * s + x2 * c;
        }
      }
    }
  }
  return make_output(x.shape(), std::move(out), {&x},
                     [batch, t_len, heads, dh, half, cos_t, sin_t](TensorNode& self) {
                       TensorNode& xs = *self.inputs[0];
                       if (!xs.requires_grad) return;
                       auto& g = xs.grad_buffer();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t t = 0; t < t_len; ++t) {
                           for (std::size_t h = 0; h < heads; ++h) {
                             const std::size_t base = ((b * t_len + t) * heads + h) * dh;
                             for (std::size_t i = 0; i < half; ++i) {
                               const double c = (*cos_t)[t * half + i], s = (*sin_t)[t * half + i];
                               const double g1 = self.grad[base + i], g2 = self.grad[base + half + i];
                               g[base + i] += g1 * c + g2 * s;
                               g[base + half + i] += -g1 * s + g2 * c;
                             }
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.clone(true);
  return grad_check_params([&] { return f(probe); }, {probe}, h).max_rel_error;
}

GradCheckResult grad_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h,
                                  std::size_t max_coords_per_tensor) {
  Tape& tape = Tape::active();
  tape.reset();
  for (const Tensor& p : params) {
    if (!p.requires_grad()) throw AutodiffError("grad_check: parameter does not require grad");
    Tensor(p).clear_grad();
  }
  const Tensor y = f();
  if (y.numel() != 1) {
    tape.reset();
    throw AutodiffError(fmt::format("grad_check: function output has shape {}, expected a scalar",
                                    shape_to_string(y.shape())));
  }
  tape.backward(y);
  std::vector<std::vector<double>> analytic;
  for (const Tensor& p : params) analytic.push_back(p.grad());
  tape.reset();

  NoGradGuard no_grad;
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto values = p.mutable_data();
    const std::size_t n = values.size();
    const std::size_t probes = max_coords_per_tensor == 0 ? n : std::min(n, max_coords_per_tensor);
    for (std::size_t c = 0; c < probes; ++c) {
      const std::size_t i = probes == n ? c : (c * n) / probes;
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = f().item();
      values[i] = saved - h;
      const double fm = f().item();
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace idpo

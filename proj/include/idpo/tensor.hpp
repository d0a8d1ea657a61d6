// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a node that owns contiguous row-major
// storage. Operations whose inputs require gradients append their output
// node to the calling thread's active Tape; Tape::backward replays those
// nodes in reverse creation order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idpo {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(TensorNode&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place writes bypass the tape; only valid on leaves (parameters).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Same storage values, no history, requires_grad = false.
  Tensor detach() const;
  // Deep copy of the values; history is not copied.
  Tensor clone(bool requires_grad = false) const;

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

class Tape {
 public:
  // The calling thread's tape.
  static Tape& active();

  void record(std::shared_ptr<detail::TensorNode> node);
  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad ancestor.
  // A second call without reset() throws.
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::shared_ptr<detail::TensorNode>> nodes_;
  bool consumed_ = false;
};

void backward(const Tensor& loss);

bool grad_enabled();

// Disables recording for the guard's lifetime on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (identical shapes) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// -softplus(-x), evaluated without overflow.
Tensor log_sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor rsqrt(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- linear algebra ----
// a[..., m, k] x b[..., k, n]. Batch dims must match exactly, or b may be 2-D
// and is then shared across every batch entry of a.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] times weight[out, in] transposed -> [..., out].
Tensor linear(const Tensor& x, const Tensor& weight);
// Swaps two axes; materializes a contiguous copy.
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor reshape(const Tensor& a, Shape shape);

// ---- indexing ----
// Rows [begin, end) along axis 0.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
// Concatenation along axis 0; trailing dims must agree.
Tensor concat(const std::vector<Tensor>& parts);
// out[i] = a.flat[indices[i]], shape [indices.size()].
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
// out[segments[i]] += a[i]; a must be 1-D.
Tensor segment_sum(const Tensor& a, std::span<const std::size_t> segments, std::size_t n_segments);
// Rows of weight[V, d] selected by ids; result shape = out_prefix + [d].
Tensor embedding(const Tensor& weight, std::span<const int> ids, Shape out_prefix);

// ---- neural-net primitives ----
Tensor log_softmax(const Tensor& a);  // along the last axis
Tensor softmax(const Tensor& a);      // along the last axis
// scores[B, H, T, T]; query t sees keys s <= t with key_valid[b*T + s] != 0.
// An empty key_valid means every key is valid.
Tensor causal_softmax(const Tensor& scores, std::span<const std::uint8_t> key_valid);
// x[..., d] / rms(x) * weight[d].
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);
// Rotary embedding on x[B, T, H, dh] using rotate-half pairing; dh even.
Tensor rope(const Tensor& x, double theta);

// Central-difference check of f's gradient at x. Returns
// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

// Same check over coordinates of existing leaf tensors, perturbed in place.
// When max_coords_per_tensor > 0 only that many evenly spaced coordinates
// of each tensor are probed.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};
GradCheckResult grad_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                  double h, std::size_t max_coords_per_tensor = 0);

}  // namespace idpo

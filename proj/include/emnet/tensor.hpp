// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Ops on tensors that require
// gradients record their inputs and a backward rule on the result; backward()
// replays that record in reverse topological order. Leaf gradients accumulate
// across backward calls until zero_grad() is called.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace emnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // empty for leaves

  bool is_leaf() const { return !backward; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor from_values(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Writable view; only meaningful for leaves (optimizer updates, perturbation).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Copy of the values as a fresh leaf that does not participate in the tape.
  Tensor detach() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  friend Tensor make_op_result(Shape, std::vector<double>, std::initializer_list<Tensor>,
                               std::function<void(detail::Node&)>);
  friend Tensor make_op_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                               std::function<void(detail::Node&)>);
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. The backward rule is only attached when some parent
/// requires gradients; it reads out.grad and accumulates into out.parents.
Tensor make_op_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                      std::function<void(detail::Node&)> backward);
Tensor make_op_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                      std::function<void(detail::Node&)> backward);

/// Ordered record of the differentiable ops reachable from a root, in
/// topological order (inputs before outputs).
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  std::size_t leaf_count() const;
  /// Reverse replay; seeds the root gradient with 1.
  void replay_backward();

 private:
  std::vector<detail::Node*> order_;
};

void backward(const Tensor& loss);

/// While alive on a thread, ops on that thread record no backward rules.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

// Linear algebra and structure.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
/// out[i] = x[i, index[i]] for a 2-D x.
Tensor select(const Tensor& x, std::span<const int> index);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double c);
/// x[m×n] + bias[n] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);
/// x[m×n] * gain[n] on every row.
Tensor mul_row(const Tensor& x, const Tensor& gain);
Tensor exp(const Tensor& x);
/// Throws DomainError on non-positive input.
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);

// Normalization.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Row-wise softmax of a square-or-wide score matrix where column j > row i is excluded.
Tensor causal_softmax(const Tensor& scores);
inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes over the last axis; no affine transform.
Tensor layer_norm(const Tensor& x, double eps = kLayerNormEps);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_sq(const Tensor& x);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

inline constexpr double kGradCheckStep = 1e-5;

/// Central-difference check of d f / d x. Error per coordinate is
/// |analytic - numeric| / max(1e-8, |numeric|).
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = kGradCheckStep);

/// Same check over a set of leaves that `loss` closes over. Leaf values are
/// perturbed in place and restored; existing gradients are cleared.
GradCheckResult grad_check_leaves(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                                  double h = kGradCheckStep);

}  // namespace emnet

// SPDX-License-Identifier: Apache-2.0
#include "emnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "emnet/error.hpp"

namespace emnet {

namespace {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Grad buffer of a parent, or nullptr when it does not take part in the tape.
std::vector<double>* parent_grad(detail::Node& out, std::size_t i) {
  detail::Node& p = *out.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// y = A(m×k) · B(k×n), accumulated into y.
void gemm_acc(const double* a, const double* b, double* y, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = y + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += av * br[j];
    }
  }
}

thread_local bool g_no_grad = false;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_values(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0) throw DimensionError("matrix: no rows");
  const std::size_t n = rows.begin()->size();
  std::vector<double> v;
  v.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("matrix: ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), n}, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return values().size(); }

std::size_t Tensor::rows() const {
  if (rank() == 0) return 1;
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() < 2) return rank() == 1 ? shape()[0] : 1;
  return shape()[1];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " values");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return values()[i]; }

double Tensor::at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(values().begin(), values().end())); }

Tensor make_op_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                      std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool any = !g_no_grad &&
                   std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_op_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                      std::function<void(detail::Node&)> backward) {
  return make_op_result(std::move(shape), std::move(value), std::vector<Tensor>(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// Tape

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.node_ || !root.node_->requires_grad) return tape;
  std::unordered_set<const detail::Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node_.get(), 0);
  seen.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

std::size_t Tape::leaf_count() const {
  return static_cast<std::size_t>(
      std::count_if(order_.begin(), order_.end(), [](const detail::Node* n) { return n->is_leaf(); }));
}

void Tape::replay_backward() {
  if (order_.empty()) return;
  for (auto* n : order_) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  order_.back()->ensure_grad()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  Tape::record(loss).replay_backward();
}

// ---------------------------------------------------------------------------
// Linear algebra and structure

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  std::vector<double> y(m * n, 0.0);
  gemm_acc(a.values().data(), b.values().data(), y.data(), m, k, n);
  return make_op_result({m, n}, std::move(y), {a, b}, [m, k, n](detail::Node& out) {
    const auto& av = out.parents[0]->value;
    const auto& bv = out.parents[1]->value;
    const auto& g = out.grad;
    if (auto* ga = parent_grad(out, 0)) {
      // ga += g · bᵀ
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (auto* gb = parent_grad(out, 1)) {
      // gb += aᵀ · g
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av[i * k + p];
          if (av_ip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += av_ip * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = av[i * n + j];
  return make_op_result({n, m}, std::move(y), {a}, [m, n](detail::Node& out) {
    auto* ga = parent_grad(out, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += out.grad[j * m + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) throw DimensionError("concat: extent mismatch");
    }
    shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_axis(shape, axis);
  std::vector<double> y(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.shape()[axis];
    const auto pv = p.values();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t i = 0; i < s.inner; ++i)
          y[(o * s.n + off + j) * s.inner + i] = pv[(o * w + j) * s.inner + i];
    off += w;
  }
  return make_op_result(shape, std::move(y), parts, [s, offsets](detail::Node& out) {
    for (std::size_t q = 0; q < out.parents.size(); ++q) {
      auto* gp = parent_grad(out, q);
      if (!gp) continue;
      const std::size_t w = out.parents[q]->value.size() / (s.outer * s.inner);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < w; ++j)
          for (std::size_t i = 0; i < s.inner; ++i)
            (*gp)[(o * w + j) * s.inner + i] += out.grad[(o * s.n + offsets[q] + j) * s.inner + i];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (begin >= end || end > s.n) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(s.n));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t w = end - begin;
  std::vector<double> y(shape_numel(shape));
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t i = 0; i < s.inner; ++i)
        y[(o * w + j) * s.inner + i] = xv[(o * s.n + begin + j) * s.inner + i];
  return make_op_result(shape, std::move(y), {x}, [s, begin, w](detail::Node& out) {
    auto* gx = parent_grad(out, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t i = 0; i < s.inner; ++i)
          (*gx)[(o * s.n + begin + j) * s.inner + i] += out.grad[(o * w + j) * s.inner + i];
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) throw ContractError("embedding_lookup: empty id sequence");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<double> y(idv.size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || static_cast<std::size_t>(idv[r]) >= vocab) {
      throw VocabError("token id " + std::to_string(idv[r]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(idv[r] * d), d, y.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return make_op_result({idv.size(), d}, std::move(y), {table}, [idv, d](detail::Node& out) {
    auto* gt = parent_grad(out, 0);
    if (!gt) return;
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) (*gt)[static_cast<std::size_t>(idv[r]) * d + j] += out.grad[r * d + j];
  });
}

Tensor select(const Tensor& x, std::span<const int> index) {
  require_rank(x, 2, "select");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (index.size() != m) throw DimensionError("select: one index per row required");
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) throw DimensionError("select: index out of range");
    y[i] = x.at(i, static_cast<std::size_t>(idx[i]));
  }
  return make_op_result({m}, std::move(y), {x}, [idx, n](detail::Node& out) {
    auto* gx = parent_grad(out, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[i * n + static_cast<std::size_t>(idx[i])] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return make_op_result(a.shape(), std::move(y), {a, b}, [](detail::Node& out) {
    for (std::size_t q = 0; q < 2; ++q) {
      if (auto* g = parent_grad(out, q))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return make_op_result(a.shape(), std::move(y), {a, b}, [](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    if (auto* g = parent_grad(out, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= out.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return make_op_result(a.shape(), std::move(y), {a, b}, [](detail::Node& out) {
    const auto& av = out.parents[0]->value;
    const auto& bv = out.parents[1]->value;
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * bv[i];
    if (auto* g = parent_grad(out, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (auto& v : y) v *= factor;
  return make_op_result(x.shape(), std::move(y), {x}, [factor](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (auto& v : y) v += c;
  return make_op_result(x.shape(), std::move(y), {x}, [](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row");
  require_rank(bias, 1, "add_row");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.shape()[0] != n) throw DimensionError("add_row: bias length differs from column count");
  std::vector<double> y(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += bv[j];
  return make_op_result(x.shape(), std::move(y), {x, bias}, [m, n](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i];
    if (auto* g = parent_grad(out, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += out.grad[i * n + j];
  });
}

Tensor mul_row(const Tensor& x, const Tensor& gain) {
  require_rank(x, 2, "mul_row");
  require_rank(gain, 1, "mul_row");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gain.shape()[0] != n) throw DimensionError("mul_row: gain length differs from column count");
  std::vector<double> y(x.values().begin(), x.values().end());
  const auto gv = gain.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] *= gv[j];
  return make_op_result(x.shape(), std::move(y), {x, gain}, [m, n](detail::Node& out) {
    const auto& xv = out.parents[0]->value;
    const auto& gv = out.parents[1]->value;
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += out.grad[i * n + j] * gv[j];
    if (auto* g = parent_grad(out, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += out.grad[i * n + j] * xv[i * n + j];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(xv[i]);
  return make_op_result(x.shape(), std::move(y), {x}, [](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] * out.value[i];
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(xv[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(xv[i]));
    y[i] = std::log(xv[i]);
  }
  return make_op_result(x.shape(), std::move(y), {x}, [](detail::Node& out) {
    const auto& xv = out.parents[0]->value;
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += out.grad[i] / xv[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_op_result(x.shape(), std::move(y), {x}, [](detail::Node& out) {
    const auto& xv = out.parents[0]->value;
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (xv[i] > 0.0) (*g)[i] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += (y[at(j)] = std::exp(xv[at(j)] - mx));
      for (std::size_t j = 0; j < s.n; ++j) y[at(j)] /= z;
    }
  }
  return make_op_result(x.shape(), std::move(y), {x}, [s](detail::Node& out) {
    auto* g = parent_grad(out, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) dot += out.grad[at(j)] * out.value[at(j)];
        for (std::size_t j = 0; j < s.n; ++j) (*g)[at(j)] += out.value[at(j)] * (out.grad[at(j)] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> y(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) z += std::exp(xv[at(j)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < s.n; ++j) y[at(j)] = xv[at(j)] - lse;
    }
  }
  return make_op_result(x.shape(), std::move(y), {x}, [s](detail::Node& out) {
    auto* g = parent_grad(out, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t j) { return (o * s.n + j) * s.inner + i; };
        double gsum = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) gsum += out.grad[at(j)];
        for (std::size_t j = 0; j < s.n; ++j) (*g)[at(j)] += out.grad[at(j)] - std::exp(out.value[at(j)]) * gsum;
      }
    }
  });
}

Tensor causal_softmax(const Tensor& scores) {
  require_rank(scores, 2, "causal_softmax");
  const std::size_t m = scores.shape()[0], n = scores.shape()[1];
  std::vector<double> y(m * n, 0.0);
  const auto xv = scores.values();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t lim = std::min(i + 1, n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, xv[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < lim; ++j) z += (y[i * n + j] = std::exp(xv[i * n + j] - mx));
    for (std::size_t j = 0; j < lim; ++j) y[i * n + j] /= z;
  }
  return make_op_result(scores.shape(), std::move(y), {scores}, [m, n](detail::Node& out) {
    auto* g = parent_grad(out, 0);
    if (!g) return;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t lim = std::min(i + 1, n);
      double dot = 0.0;
      for (std::size_t j = 0; j < lim; ++j) dot += out.grad[i * n + j] * out.value[i * n + j];
      for (std::size_t j = 0; j < lim; ++j) (*g)[i * n + j] += out.value[i * n + j] * (out.grad[i * n + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  std::vector<double> y(x.numel());
  std::vector<double> inv_std(m);
  const auto xv = x.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (xr[j] - mu) * inv_std[r];
  }
  return make_op_result(x.shape(), std::move(y), {x}, [m, n, inv_std](detail::Node& out) {
    auto* g = parent_grad(out, 0);
    if (!g) return;
    const double nn = static_cast<double>(n);
    for (std::size_t r = 0; r < m; ++r) {
      const double* gr = out.grad.data() + r * n;
      const double* yr = out.value.data() + r * n;
      double gmean = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gmean += gr[j];
        gy += gr[j] * yr[j];
      }
      gmean /= nn;
      gy /= nn;
      for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += inv_std[r] * (gr[j] - gmean - yr[j] * gy);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  return add_row(mul_row(layer_norm(x, eps), gain), bias);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return make_op_result({}, {s}, {x}, [](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (auto& v : *g) v += out.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto xv = x.values();
  const double n = static_cast<double>(xv.size());
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0) / n;
  return make_op_result({}, {s}, {x}, [n](detail::Node& out) {
    if (auto* g = parent_grad(out, 0))
      for (auto& v : *g) v += out.grad[0] / n;
  });
}

Tensor sum_sq(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return make_op_result({}, {s}, {x}, [](detail::Node& out) {
    const auto& xv = out.parents[0]->value;
    if (auto* g = parent_grad(out, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * xv[i] * out.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check_leaves(const std::function<Tensor()>& loss, std::span<Tensor> leaves, double h) {
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }

  GradCheckResult res;
  for (std::size_t q = 0; q < leaves.size(); ++q) {
    auto vals = leaves[q].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = loss().item();
      vals[i] = orig - h;
      const double fm = loss().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[q][i] - numeric) / std::max(1e-8, std::abs(numeric));
      ++res.coordinates;
      if (err > res.max_rel_error || res.coordinates == 1) {
        res.max_rel_error = err;
        res.worst_tensor = q;
        res.worst_index = i;
        res.worst_analytic = analytic[q][i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<Tensor> leaf{x.detach()};
  leaf[0].set_requires_grad(true);
  return grad_check_leaves([&] { return f(leaf[0]); }, leaf, h);
}

}  // namespace emnet

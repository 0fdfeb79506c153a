#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Var is a handle to a graph node. Leaves created with requires_grad=true
// accumulate gradients across backward() calls until zero_grad(). Ops whose
// inputs all have requires_grad=false produce plain constants and record no
// graph, so frozen sub-networks cost a forward pass only.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gfss/error.hpp"
#include "gfss/tensor.hpp"

namespace gfss {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }
  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Direct write access for optimizers and calibration; never call on a
  // node that is part of a live graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->has_grad; }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<T>();
  }

  // Same value, no gradient path.
  Var detach() const { return constant(node_->value); }

  Node<T>* get() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Records an op node. `bw` receives the node and may call parent_grad(n, i).
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(bw);
  }
  return Var<T>(std::move(n));
}

// Gradient buffer of the i-th parent, or nullptr when that parent is frozen.
template <typename T>
Tensor<T>* parent_grad(Node<T>& n, std::size_t i) {
  auto& p = n.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.get()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad) n->backward(*n);
  }
}

namespace ag {

namespace detail {
template <typename T>
void require_matrix(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix");
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = parent_grad(n, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * n.grad[i];
  });
}

// Sum of all entries, shape [1].
template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{};
  for (T v : a.value().values()) s += v;
  return make_op<T>(Tensor<T>({1}, s), {a}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (auto& v : g->values()) v += n.grad[0];
  });
}

// Sum of scalar Vars.
template <typename T>
Var<T> add_scalars(const std::vector<Var<T>>& xs) {
  if (xs.empty()) return Var<T>::constant(Tensor<T>({1}));
  T s{};
  for (const auto& x : xs) {
    if (x.value().size() != 1) throw ShapeError("add_scalars: non-scalar input");
    s += x.value()[0];
  }
  return make_op<T>(Tensor<T>({1}, s), xs, [](Node<T>& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k)
      if (auto* g = parent_grad(n, k)) (*g)[0] += n.grad[0];
  });
}

// C = A (n x k) * B (k x m)
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  if (B.rows() != k)
    throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor<T> C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = &C(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A(i, p);
      const T* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_op<T>(std::move(C), {a, b}, [n, k, m](Node<T>& nd) {
    const auto& A = nd.parents[0]->value;
    const auto& B = nd.parents[1]->value;
    const auto& G = nd.grad;
    if (auto* ga = parent_grad(nd, 0)) {
      // dA = G B^T
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s{};
          const T* grow = G.data() + i * m;
          const T* brow = B.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
          (*ga)(i, p) += s;
        }
    }
    if (auto* gb = parent_grad(nd, 1)) {
      // dB = A^T G
      for (std::size_t i = 0; i < n; ++i) {
        const T* grow = G.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A(i, p);
          T* gbrow = gb->data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix(a, "transpose");
  return make_op<T>(transposed(a.value()), {a}, [](Node<T>& n) {
    if (auto* g = parent_grad(n, 0)) {
      const std::size_t r = g->rows(), c = g->cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += n.grad(j, i);
    }
  });
}

// out(i, j) = a(i, j) * r(0, j)
template <typename T>
Var<T> mul_row(const Var<T>& a, const Var<T>& r) {
  detail::require_matrix(a, "mul_row");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (r.value().size() != cols) throw ShapeError("mul_row: row vector length mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) *= r.value()[j];
  return make_op<T>(std::move(out), {a, r}, [rows, cols](Node<T>& n) {
    const auto& A = n.parents[0]->value;
    const auto& R = n.parents[1]->value;
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*g)(i, j) += n.grad(i, j) * R[j];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*g)[j] += n.grad(i, j) * A(i, j);
  });
}

// out(i, j) = a(i, j) + r(0, j)
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  detail::require_matrix(a, "add_row");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (r.value().size() != cols) throw ShapeError("add_row: row vector length mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) += r.value()[j];
  return make_op<T>(std::move(out), {a, r}, [rows, cols](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*g)[j] += n.grad(i, j);
  });
}

// Column-wise dot products of two d x C matrices, shape [1 x C].
template <typename T>
Var<T> col_dot(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a, "col_dot");
  if (a.shape() != b.shape()) throw ShapeError("col_dot: shape mismatch");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  Tensor<T> out({1, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += a.value()(i, j) * b.value()(i, j);
  return make_op<T>(std::move(out), {a, b}, [rows, cols](Node<T>& n) {
    const auto& A = n.parents[0]->value;
    const auto& B = n.parents[1]->value;
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*g)(i, j) += n.grad[j] * B(i, j);
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) (*g)(i, j) += n.grad[j] * A(i, j);
  });
}

// Each row divided by its Euclidean norm. Rows with norm below `min_norm`
// violate the prototype invariant and raise InvariantError.
template <typename T>
Var<T> normalize_rows(const Var<T>& a, T min_norm = T(1e-8)) {
  detail::require_matrix(a, "normalize_rows");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  Tensor<T> out = a.value();
  std::vector<T> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T s{};
    for (std::size_t j = 0; j < cols; ++j) s += out(i, j) * out(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] >= min_norm))
      throw InvariantError("normalize_rows: row " + std::to_string(i) + " has norm below " +
                           std::to_string(static_cast<double>(min_norm)));
    for (std::size_t j = 0; j < cols; ++j) out(i, j) /= norms[i];
  }
  return make_op<T>(std::move(out), {a}, [rows, cols, norms](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    const auto& U = n.value;
    for (std::size_t i = 0; i < rows; ++i) {
      T dot{};
      for (std::size_t j = 0; j < cols; ++j) dot += n.grad(i, j) * U(i, j);
      for (std::size_t j = 0; j < cols; ++j)
        (*g)(i, j) += (n.grad(i, j) - dot * U(i, j)) / norms[i];
    }
  });
}

template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor<T> out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    const T* in = x.data() + i * cols;
    T* o = out.data() + i * cols;
    T mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    T s{};
    for (std::size_t j = 0; j < cols; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  detail::require_matrix(a, "softmax_rows");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  return make_op<T>(softmax_rows_value(a.value()), {a}, [rows, cols](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    const auto& P = n.value;
    for (std::size_t i = 0; i < rows; ++i) {
      T dot{};
      for (std::size_t j = 0; j < cols; ++j) dot += n.grad(i, j) * P(i, j);
      for (std::size_t j = 0; j < cols; ++j) (*g)(i, j) += P(i, j) * (n.grad(i, j) - dot);
    }
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  const std::size_t rows = a.value().rows(), ca = a.value().cols(), cb = b.value().cols();
  if (b.value().rows() != rows) throw ShapeError("concat_cols: row count mismatch");
  Tensor<T> out({rows, ca + cb});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out(i, j) = a.value()(i, j);
    for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = b.value()(i, j);
  }
  return make_op<T>(std::move(out), {a, b}, [rows, ca, cb](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) (*g)(i, j) += n.grad(i, j);
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cb; ++j) (*g)(i, j) += n.grad(i, ca + j);
  });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  const std::size_t cols = a.value().cols();
  if (b.value().cols() != cols) throw ShapeError("concat_rows: column count mismatch");
  const std::size_t na = a.value().size();
  Tensor<T> out({a.value().rows() + b.value().rows(), cols});
  std::copy(a.value().data(), a.value().data() + na, out.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + na);
  return make_op<T>(std::move(out), {a, b}, [na](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < na; ++i) (*g)[i] += n.grad[i];
    if (auto* g = parent_grad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[na + i];
  });
}

template <typename T>
Var<T> select_cols(const Var<T>& a, const std::vector<std::size_t>& cols_idx) {
  detail::require_matrix(a, "select_cols");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  for (auto c : cols_idx)
    if (c >= cols) throw RangeError("select_cols: column index out of range");
  Tensor<T> out({rows, cols_idx.size()});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols_idx.size(); ++j) out(i, j) = a.value()(i, cols_idx[j]);
  return make_op<T>(std::move(out), {a}, [rows, cols_idx](Node<T>& n) {
    if (auto* g = parent_grad(n, 0))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols_idx.size(); ++j) (*g)(i, cols_idx[j]) += n.grad(i, j);
  });
}

// Sum over i != j of |G(i, j)| for a square matrix; the subgradient at an
// exact zero entry is 0.
template <typename T>
Var<T> abs_offdiag_sum(const Var<T>& g) {
  detail::require_matrix(g, "abs_offdiag_sum");
  const std::size_t n = g.value().rows();
  if (g.value().cols() != n) throw ShapeError("abs_offdiag_sum: matrix must be square");
  T s{};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += std::abs(g.value()(i, j));
  return make_op<T>(Tensor<T>({1}, s), {g}, [n](Node<T>& nd) {
    auto* gr = parent_grad(nd, 0);
    if (!gr) return;
    const auto& G = nd.parents[0]->value;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const T v = G(i, j);
        const T sign = v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
        (*gr)(i, j) += nd.grad[0] * sign;
      }
  });
}

}  // namespace ag
}  // namespace gfss

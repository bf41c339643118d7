#pragma once

#include "stacklab/common.hpp"
#include "stacklab/rng.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace stacklab {

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tensor is a value-semantic handle to a graph node. Ops are free functions
// that record a pull-back closure when (a) recording is enabled and (b) some
// input lies on a path from a parameter. backward(loss) runs the closures in
// reverse topological order; gradient accumulation is additive across uses.
// Graphs are per-forward-pass: releasing the loss tensor frees the graph.

inline bool& grad_recording() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_recording()) { grad_recording() = false; }
  ~NoGradGuard() { grad_recording() = prev; }
};

template <class S> struct TensorNode {
  Matrix<S> value;
  Matrix<S> grad;  // empty until first accumulation
  bool on_grad_path = false;
  bool is_parameter = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> pull;

  void ensure_grad() {
    if (grad.size() == 0) grad = Matrix<S>::Zero(value.rows(), value.cols());
  }
  void accumulate(const Matrix<S>& g) {
    ensure_grad();
    grad += g;
  }
  template <class Expr> void accumulate_expr(const Expr& g) {
    ensure_grad();
    grad += g;
  }
};

template <class S> class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor from_matrix(Matrix<S> v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return Tensor(std::move(n));
  }
  static Tensor from_vector(Vector<S> v) { return from_matrix(Matrix<S>(std::move(v))); }
  static Tensor scalar(S v) {
    Matrix<S> m(1, 1);
    m(0, 0) = v;
    return from_matrix(std::move(m));
  }
  static Tensor zeros(Index rows, Index cols) { return from_matrix(Matrix<S>::Zero(rows, cols)); }
  static Tensor parameter(Matrix<S> v) {
    auto t = from_matrix(std::move(v));
    t.n_->on_grad_path = true;
    t.n_->is_parameter = true;
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Matrix<S>& value() const { return n_->value; }
  Matrix<S>& mutable_value() { return n_->value; }
  Index rows() const { return n_->value.rows(); }
  Index cols() const { return n_->value.cols(); }
  Index size() const { return n_->value.size(); }
  bool requires_grad() const { return n_->on_grad_path; }
  S scalar_value() const {
    require(size() == 1, "Tensor::scalar_value on non-scalar " + shape_str(rows(), cols()));
    return n_->value(0, 0);
  }
  // Zero matrix when no gradient has been accumulated.
  Matrix<S> grad() const {
    if (n_->grad.size() == 0) return Matrix<S>::Zero(rows(), cols());
    return n_->grad;
  }
  void zero_grad() {
    if (n_->grad.size() != 0) n_->grad.setZero();
  }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Builds an op node. `pull` sees the finished node; inputs are node->parents
// in the order given here. Recording is skipped when disabled or when no
// input can reach a parameter.
template <class S, class F>
Tensor<S> make_op(Matrix<S> value, std::vector<Tensor<S>> inputs, F&& pull) {
  auto n = std::make_shared<TensorNode<S>>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_recording()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->on_grad_path = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->pull = std::forward<F>(pull);
  }
  return Tensor<S>(std::move(n));
}

// Accumulate `g` into parent `i` of `self` if that parent wants gradients.
template <class S, class Expr>
void pull_into(TensorNode<S>& self, size_t i, const Expr& g) {
  auto& p = *self.parents[i];
  if (p.on_grad_path) p.accumulate_expr(g);
}

template <class S> void backward(const Tensor<S>& loss) {
  require(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.rows(), loss.cols()));
  using Node = TensorNode<S>;
  // Iterative reverse topological order.
  std::vector<Node*> topo;
  std::unordered_set<Node*> done;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      Node* child = node->parents[next++].get();
      if (!done.count(child)) stack.push_back({child, 0});
    } else {
      done.insert(node);
      topo.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Matrix<S>::Constant(1, 1, S(1)));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->pull && n->grad.size() != 0) n->pull(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

template <class S> void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
              shape_str(b.rows(), b.cols()));
}

template <class S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  return make_op<S>(a.value() + b.value(), {a, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad);
    pull_into(self, 1, self.grad);
  });
}

template <class S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  return make_op<S>(a.value() - b.value(), {a, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad);
    pull_into(self, 1, -self.grad);
  });
}

template <class S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  return make_op<S>(a.value().cwiseProduct(b.value()), {a, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad.cwiseProduct(self.parents[1]->value));
    pull_into(self, 1, self.grad.cwiseProduct(self.parents[0]->value));
  });
}

template <class S> Tensor<S> scale(const Tensor<S>& a, S c) {
  return make_op<S>(a.value() * c, {a}, [c](TensorNode<S>& self) { pull_into(self, 0, self.grad * c); });
}

template <class S> Tensor<S> neg(const Tensor<S>& a) { return scale(a, S(-1)); }

// Scalar-valued tensor times tensor (broadcast multiply).
template <class S> Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s) {
  require(s.size() == 1, "scale_by: scale must be scalar");
  return make_op<S>(a.value() * s.value()(0, 0), {a, s}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad * self.parents[1]->value(0, 0));
    Matrix<S> gs(1, 1);
    gs(0, 0) = self.grad.cwiseProduct(self.parents[0]->value).sum();
    pull_into(self, 1, gs);
  });
}

template <class S> Tensor<S> add_scalar(const Tensor<S>& a, const Tensor<S>& s) {
  require(s.size() == 1, "add_scalar: addend must be scalar");
  return make_op<S>((a.value().array() + s.value()(0, 0)).matrix(), {a, s}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad);
    Matrix<S> gs(1, 1);
    gs(0, 0) = self.grad.sum();
    pull_into(self, 1, gs);
  });
}

template <class S> Tensor<S> sub_scalar(const Tensor<S>& a, const Tensor<S>& s) {
  require(s.size() == 1, "sub_scalar: subtrahend must be scalar");
  return make_op<S>((a.value().array() - s.value()(0, 0)).matrix(), {a, s}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad);
    Matrix<S> gs(1, 1);
    gs(0, 0) = -self.grad.sum();
    pull_into(self, 1, gs);
  });
}

template <class S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ " + shape_str(a.rows(), a.cols()) +
                                    " vs " + shape_str(b.rows(), b.cols()));
  return make_op<S>(a.value() * b.value(), {a, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad * self.parents[1]->value.transpose());
    pull_into(self, 1, self.parents[0]->value.transpose() * self.grad);
  });
}

// A * B^T without materializing the transpose as a graph node.
template <class S> Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ " + shape_str(a.rows(), a.cols()) +
                                    " vs " + shape_str(b.rows(), b.cols()));
  return make_op<S>(a.value() * b.value().transpose(), {a, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad * self.parents[1]->value);
    pull_into(self, 1, self.grad.transpose() * self.parents[0]->value);
  });
}

// W x + b for a column vector x.
template <class S> Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& W, const Tensor<S>& b) {
  require(x.cols() == 1 && b.cols() == 1,
          "affine: x and b must be column vectors, got x" + shape_str(x.rows(), x.cols()) + " b" +
              shape_str(b.rows(), b.cols()));
  require(W.cols() == x.rows() && W.rows() == b.rows(),
          "affine: shape mismatch W" + shape_str(W.rows(), W.cols()) + " x" + shape_str(x.rows(), x.cols()) +
              " b" + shape_str(b.rows(), b.cols()));
  return make_op<S>(W.value() * x.value() + b.value(), {x, W, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.parents[1]->value.transpose() * self.grad);
    pull_into(self, 1, self.grad * self.parents[0]->value.transpose());
    pull_into(self, 2, self.grad);
  });
}

// Row-batched affine: Y = X W^T + 1 b^T, X is (n x k), W is (j x k), b is (j).
template <class S> Tensor<S> linear_rows(const Tensor<S>& X, const Tensor<S>& W, const Tensor<S>& b) {
  require(X.cols() == W.cols(), "linear_rows: X" + shape_str(X.rows(), X.cols()) + " vs W" +
                                    shape_str(W.rows(), W.cols()));
  require(b.cols() == 1 && b.rows() == W.rows(), "linear_rows: bad bias shape");
  Matrix<S> y = X.value() * W.value().transpose();
  y.rowwise() += b.value().col(0).transpose();
  return make_op<S>(std::move(y), {X, W, b}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad * self.parents[1]->value);
    pull_into(self, 1, self.grad.transpose() * self.parents[0]->value);
    pull_into(self, 2, self.grad.colwise().sum().transpose());
  });
}

template <class S> Tensor<S> sum(const Tensor<S>& a) {
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return make_op<S>(std::move(v), {a}, [](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    pull_into(self, 0, Matrix<S>::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

template <class S> Tensor<S> tanh(const Tensor<S>& a) {
  return make_op<S>(a.value().array().tanh().matrix(), {a}, [](TensorNode<S>& self) {
    pull_into(self, 0, (self.grad.array() * (S(1) - self.value.array().square())).matrix());
  });
}

template <class S> Tensor<S> logistic(const Tensor<S>& a) {
  Matrix<S> y = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return make_op<S>(std::move(y), {a}, [](TensorNode<S>& self) {
    pull_into(self, 0, (self.grad.array() * self.value.array() * (S(1) - self.value.array())).matrix());
  });
}

template <class S> Tensor<S> relu(const Tensor<S>& a) {
  return make_op<S>(a.value().cwiseMax(S(0)), {a}, [](TensorNode<S>& self) {
    pull_into(self, 0,
              (self.grad.array() * (self.parents[0]->value.array() > S(0)).template cast<S>()).matrix());
  });
}

template <class S> Tensor<S> exp(const Tensor<S>& a) {
  return make_op<S>(a.value().array().exp().matrix(), {a}, [](TensorNode<S>& self) {
    pull_into(self, 0, (self.grad.array() * self.value.array()).matrix());
  });
}

template <class S> Tensor<S> log(const Tensor<S>& a) {
  return make_op<S>(a.value().array().log().matrix(), {a}, [](TensorNode<S>& self) {
    pull_into(self, 0, (self.grad.array() / self.parents[0]->value.array()).matrix());
  });
}

// log(logistic(x)), stable for large |x|.
template <class S> Tensor<S> log_logistic(const Tensor<S>& a) {
  Matrix<S> y = a.value();
  for (Index j = 0; j < y.cols(); ++j)
    for (Index i = 0; i < y.rows(); ++i) {
      const S x = y(i, j);
      y(i, j) = x > S(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    }
  return make_op<S>(std::move(y), {a}, [](TensorNode<S>& self) {
    // d/dx log sigma(x) = sigma(-x)
    auto& x = self.parents[0]->value;
    pull_into(self, 0, (self.grad.array() * (S(1) / (S(1) + x.array().exp()))).matrix());
  });
}

enum class Pointwise { tanh, logistic };

template <class S> Tensor<S> pointwise(const Tensor<S>& a, Pointwise kind) {
  return kind == Pointwise::tanh ? tanh(a) : logistic(a);
}

template <class S> Tensor<S> softmax(const Tensor<S>& x) {
  require(x.cols() == 1 && x.rows() >= 1, "softmax: expects a nonempty column vector");
  Eigen::Array<S, Eigen::Dynamic, 1> a = x.value().col(0).array();
  a -= a.maxCoeff();
  a = a.exp();
  a /= a.sum();
  return make_op<S>(Matrix<S>(a.matrix()), {x}, [](TensorNode<S>& self) {
    const auto y = self.value.col(0).array();
    const auto g = self.grad.col(0).array();
    const S dot = (g * y).sum();
    pull_into(self, 0, Matrix<S>(((g - dot) * y).matrix()));
  });
}

template <class S> Tensor<S> logsumexp(const Tensor<S>& x) {
  require(x.cols() == 1 && x.rows() >= 1, "logsumexp: expects a nonempty column vector");
  const auto a = x.value().col(0).array();
  const S m = a.maxCoeff();
  Matrix<S> v(1, 1);
  v(0, 0) = std::isinf(m) && m < S(0) ? neg_inf<S>() : m + std::log((a - m).exp().sum());
  return make_op<S>(std::move(v), {x}, [](TensorNode<S>& self) {
    const S out = self.value(0, 0);
    const S g = self.grad(0, 0);
    auto& xv = self.parents[0]->value;
    if (std::isinf(out) && out < S(0)) return;  // all weights zero; no gradient
    pull_into(self, 0, Matrix<S>((g * (xv.col(0).array() - out).exp()).matrix()));
  });
}

// Elementwise log(exp(a) + exp(b)).
template <class S> Tensor<S> logaddexp(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "logaddexp");
  Matrix<S> y(a.rows(), a.cols());
  for (Index j = 0; j < y.cols(); ++j)
    for (Index i = 0; i < y.rows(); ++i) {
      const S u = a.value()(i, j), v = b.value()(i, j);
      const S m = std::max(u, v);
      y(i, j) = (std::isinf(m) && m < S(0)) ? neg_inf<S>()
                                            : m + std::log(std::exp(u - m) + std::exp(v - m));
    }
  return make_op<S>(std::move(y), {a, b}, [](TensorNode<S>& self) {
    Matrix<S> wa(self.value.rows(), self.value.cols()), wb = wa;
    for (Index j = 0; j < wa.cols(); ++j)
      for (Index i = 0; i < wa.rows(); ++i) {
        const S out = self.value(i, j);
        if (std::isinf(out) && out < S(0)) {
          wa(i, j) = wb(i, j) = S(0);
        } else {
          wa(i, j) = std::exp(self.parents[0]->value(i, j) - out);
          wb(i, j) = std::exp(self.parents[1]->value(i, j) - out);
        }
      }
    pull_into(self, 0, self.grad.cwiseProduct(wa));
    pull_into(self, 1, self.grad.cwiseProduct(wb));
  });
}

// Elementwise log-sum-exp over a list of same-shape tensors.
template <class S> Tensor<S> logaddexp_many(const std::vector<Tensor<S>>& terms) {
  require(!terms.empty(), "logaddexp_many: empty term list");
  if (terms.size() == 1) return terms[0];
  const Index r = terms[0].rows(), c = terms[0].cols();
  Matrix<S> maxv = terms[0].value();
  for (size_t k = 1; k < terms.size(); ++k) {
    check_same_shape(terms[0], terms[k], "logaddexp_many");
    maxv = maxv.cwiseMax(terms[k].value());
  }
  ArrayXX<S> acc = ArrayXX<S>::Zero(r, c);
  for (const auto& t : terms) acc += (t.value().array() - maxv.array()).exp();
  Matrix<S> y(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i)
      y(i, j) = (std::isinf(maxv(i, j)) && maxv(i, j) < S(0)) ? neg_inf<S>()
                                                              : maxv(i, j) + std::log(acc(i, j));
  return make_op<S>(std::move(y), terms, [](TensorNode<S>& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      if (!self.parents[k]->on_grad_path) continue;
      Matrix<S> w(self.value.rows(), self.value.cols());
      for (Index j = 0; j < w.cols(); ++j)
        for (Index i = 0; i < w.rows(); ++i) {
          const S out = self.value(i, j);
          w(i, j) = (std::isinf(out) && out < S(0))
                        ? S(0)
                        : std::exp(self.parents[k]->value(i, j) - out);
        }
      self.parents[k]->accumulate(self.grad.cwiseProduct(w));
    }
  });
}

// Log-space matrix product: C_ij = logsumexp_k (A_ik + B_kj).
template <class S> Tensor<S> log_matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.cols() == b.rows(), "log_matmul: inner dimensions differ");
  const Index n = a.rows(), k = a.cols(), m = b.cols();
  Matrix<S> c(n, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < n; ++i) {
      S mx = neg_inf<S>();
      for (Index t = 0; t < k; ++t) mx = std::max(mx, a.value()(i, t) + b.value()(t, j));
      if (std::isinf(mx) && mx < S(0)) {
        c(i, j) = neg_inf<S>();
        continue;
      }
      S acc = S(0);
      for (Index t = 0; t < k; ++t) acc += std::exp(a.value()(i, t) + b.value()(t, j) - mx);
      c(i, j) = mx + std::log(acc);
    }
  return make_op<S>(std::move(c), {a, b}, [](TensorNode<S>& self) {
    auto& A = self.parents[0]->value;
    auto& B = self.parents[1]->value;
    const Index n = A.rows(), k = A.cols(), m = B.cols();
    Matrix<S> ga = Matrix<S>::Zero(n, k), gb = Matrix<S>::Zero(k, m);
    for (Index j = 0; j < m; ++j)
      for (Index i = 0; i < n; ++i) {
        const S out = self.value(i, j);
        if (std::isinf(out) && out < S(0)) continue;
        const S g = self.grad(i, j);
        if (g == S(0)) continue;
        for (Index t = 0; t < k; ++t) {
          const S w = std::exp(A(i, t) + B(t, j) - out);
          ga(i, t) += g * w;
          gb(t, j) += g * w;
        }
      }
    pull_into(self, 0, ga);
    pull_into(self, 1, gb);
  });
}

template <class S> Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat: needs at least one part");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.cols() == 1, "concat: parts must be column vectors");
    total += p.rows();
  }
  Matrix<S> v(total, 1);
  Index at = 0;
  for (const auto& p : parts) {
    v.block(at, 0, p.rows(), 1) = p.value();
    at += p.rows();
  }
  return make_op<S>(std::move(v), parts, [](TensorNode<S>& self) {
    Index at = 0;
    for (size_t i = 0; i < self.parents.size(); ++i) {
      const Index r = self.parents[i]->value.rows();
      pull_into(self, i, self.grad.block(at, 0, r, 1));
      at += r;
    }
  });
}

template <class S> Tensor<S> rows_of(const Tensor<S>& a, Index r0, Index n) {
  require(r0 >= 0 && n >= 0 && r0 + n <= a.rows(), "rows_of: range out of bounds");
  return make_op<S>(Matrix<S>(a.value().middleRows(r0, n)), {a}, [r0, n](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    p.grad.middleRows(r0, n) += self.grad;
  });
}

template <class S> Tensor<S> cols_of(const Tensor<S>& a, Index c0, Index n) {
  require(c0 >= 0 && n >= 0 && c0 + n <= a.cols(), "cols_of: range out of bounds");
  return make_op<S>(Matrix<S>(a.value().middleCols(c0, n)), {a}, [c0, n](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    p.grad.middleCols(c0, n) += self.grad;
  });
}

// Row i as a column vector.
template <class S> Tensor<S> row(const Tensor<S>& a, Index i) {
  require(i >= 0 && i < a.rows(), "row: index out of bounds");
  return make_op<S>(Matrix<S>(a.value().row(i).transpose()), {a}, [i](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    p.grad.row(i) += self.grad.transpose();
  });
}

template <class S> Tensor<S> element(const Tensor<S>& a, Index i, Index j) {
  require(i >= 0 && i < a.rows() && j >= 0 && j < a.cols(), "element: index out of bounds");
  Matrix<S> v(1, 1);
  v(0, 0) = a.value()(i, j);
  return make_op<S>(std::move(v), {a}, [i, j](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    p.grad(i, j) += self.grad(0, 0);
  });
}

// Reads `rows*cols` consecutive entries of a column vector, starting at
// `offset`, as a row-major (rows x cols) matrix.
template <class S> Tensor<S> block_rowmajor(const Tensor<S>& vec, Index offset, Index rows, Index cols) {
  require(vec.cols() == 1, "block_rowmajor: source must be a column vector");
  require(offset >= 0 && offset + rows * cols <= vec.rows(), "block_rowmajor: range out of bounds");
  Matrix<S> v(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) v(i, j) = vec.value()(offset + i * cols + j, 0);
  return make_op<S>(std::move(v), {vec}, [offset, rows, cols](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) p.grad(offset + i * cols + j, 0) += self.grad(i, j);
  });
}

template <class S> Tensor<S> embedding_lookup(const Tensor<S>& E, Index id) {
  require(id >= 0 && id < E.rows(),
          "embedding_lookup: id " + std::to_string(id) + " out of range [0," + std::to_string(E.rows()) + ")");
  return row(E, id);
}

template <class S> Tensor<S> embedding_rows(const Tensor<S>& E, const std::vector<int>& ids) {
  Matrix<S> v(static_cast<Index>(ids.size()), E.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < E.rows(), "embedding_rows: id " + std::to_string(ids[i]) +
                                                  " out of range [0," + std::to_string(E.rows()) + ")");
    v.row(static_cast<Index>(i)) = E.value().row(ids[i]);
  }
  return make_op<S>(std::move(v), {E}, [ids](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) p.grad.row(ids[i]) += self.grad.row(static_cast<Index>(i));
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row layer norm over the columns of X; gain/bias are length-cols vectors.
template <class S> Tensor<S> layer_norm_rows(const Tensor<S>& X, const Tensor<S>& gain, const Tensor<S>& bias) {
  require(X.cols() >= 2, "layer_norm_rows: needs width >= 2");
  require(gain.rows() == X.cols() && bias.rows() == X.cols() && gain.cols() == 1 && bias.cols() == 1,
          "layer_norm_rows: gain/bias must be length-" + std::to_string(X.cols()) + " vectors");
  const Index n = X.rows(), d = X.cols();
  Matrix<S> xhat(n, d);
  Vector<S> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const auto r = X.value().row(i).array();
    const S mean = r.mean();
    const S var = (r - mean).square().mean();
    const S is = S(1) / std::sqrt(var + S(kLayerNormEps));
    inv_std(i) = is;
    xhat.row(i) = ((r - mean) * is).matrix();
  }
  Matrix<S> y = xhat;
  y.array().rowwise() *= gain.value().col(0).transpose().array();
  y.array().rowwise() += bias.value().col(0).transpose().array();
  return make_op<S>(std::move(y), {X, gain, bias},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<S>& self) {
                      const Index n = self.value.rows(), d = self.value.cols();
                      const auto gv = self.parents[1]->value.col(0).transpose().array();
                      Matrix<S> dX(n, d);
                      for (Index i = 0; i < n; ++i) {
                        const auto g = self.grad.row(i).array();
                        Eigen::Array<S, 1, Eigen::Dynamic> dxh = g * gv;
                        const S m1 = dxh.mean();
                        const S m2 = (dxh * xhat.row(i).array()).mean();
                        dX.row(i) = ((dxh - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
                      }
                      pull_into(self, 0, dX);
                      pull_into(self, 1, (self.grad.array() * xhat.array()).colwise().sum().transpose().matrix());
                      pull_into(self, 2, self.grad.colwise().sum().transpose());
                    });
}

template <class S> Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
  require(x.cols() == 1, "layer_norm: expects a column vector");
  Tensor<S> xt = make_op<S>(Matrix<S>(x.value().transpose()), {x}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad.transpose());
  });
  Tensor<S> y = layer_norm_rows(xt, gain, bias);
  return make_op<S>(Matrix<S>(y.value().transpose()), {y}, [](TensorNode<S>& self) {
    pull_into(self, 0, self.grad.transpose());
  });
}

// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
// Identity when rate == 0 or not training. Mask draws consume the stream in
// column-major storage order.
template <class S> Tensor<S> dropout(const Tensor<S>& x, double rate, RngStream& rng, bool training) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0,1)");
  if (!training || rate == 0.0) return x;
  Matrix<S> mask(x.rows(), x.cols());
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (Index j = 0; j < x.cols(); ++j)
    for (Index i = 0; i < x.rows(); ++i) mask(i, j) = rng.bernoulli(rate) ? S(0) : keep_scale;
  return make_op<S>(x.value().cwiseProduct(mask), {x}, [mask](TensorNode<S>& self) {
    pull_into(self, 0, self.grad.cwiseProduct(mask));
  });
}

// Row-wise softmax where row i attends to columns 0..i (causal mask).
template <class S> Tensor<S> causal_softmax_rows(const Tensor<S>& scores) {
  require(scores.rows() == scores.cols(), "causal_softmax_rows: expects square score matrix");
  const Index n = scores.rows();
  Matrix<S> y = Matrix<S>::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    const auto r = scores.value().row(i).head(i + 1).array();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (r - r.maxCoeff()).exp();
    y.row(i).head(i + 1) = (e / e.sum()).matrix();
  }
  return make_op<S>(std::move(y), {scores}, [](TensorNode<S>& self) {
    const Index n = self.value.rows();
    Matrix<S> dx = Matrix<S>::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
      const auto yv = self.value.row(i).head(i + 1).array();
      const auto g = self.grad.row(i).head(i + 1).array();
      const S dot = (g * yv).sum();
      dx.row(i).head(i + 1) = ((g - dot) * yv).matrix();
    }
    pull_into(self, 0, dx);
  });
}

// Stacks single-row tensors vertically.
template <class S> Tensor<S> vstack_rows(const std::vector<Tensor<S>>& rows) {
  require(!rows.empty(), "vstack_rows: empty row list");
  const Index c = rows[0].cols();
  Matrix<S> v(static_cast<Index>(rows.size()), c);
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].rows() == 1 && rows[i].cols() == c, "vstack_rows: rows must share shape (1xC)");
    v.row(static_cast<Index>(i)) = rows[i].value();
  }
  return make_op<S>(std::move(v), rows, [](TensorNode<S>& self) {
    for (size_t i = 0; i < self.parents.size(); ++i)
      pull_into(self, i, self.grad.row(static_cast<Index>(i)));
  });
}

template <class S> Tensor<S> transpose(const Tensor<S>& a) {
  return make_op<S>(Matrix<S>(a.value().transpose()), {a},
                    [](TensorNode<S>& self) { pull_into(self, 0, self.grad.transpose()); });
}

// Stacks equal-height blocks side by side.
template <class S> Tensor<S> hstack_cols(const std::vector<Tensor<S>>& blocks) {
  require(!blocks.empty(), "hstack_cols: empty block list");
  const Index r = blocks[0].rows();
  Index total = 0;
  for (const auto& b : blocks) {
    require(b.rows() == r, "hstack_cols: blocks must share height");
    total += b.cols();
  }
  Matrix<S> v(r, total);
  Index at = 0;
  for (const auto& b : blocks) {
    v.middleCols(at, b.cols()) = b.value();
    at += b.cols();
  }
  return make_op<S>(std::move(v), blocks, [](TensorNode<S>& self) {
    Index at = 0;
    for (size_t i = 0; i < self.parents.size(); ++i) {
      const Index c = self.parents[i]->value.cols();
      pull_into(self, i, self.grad.middleCols(at, c));
      at += c;
    }
  });
}

// Column-major flattening into a column vector (Eigen storage order).
template <class S> Tensor<S> flatten_cm(const Tensor<S>& a) {
  Matrix<S> v(a.size(), 1);
  v.col(0) = Eigen::Map<const Vector<S>>(a.value().data(), a.size());
  return make_op<S>(std::move(v), {a}, [](TensorNode<S>& self) {
    auto& p = *self.parents[0];
    if (!p.on_grad_path) return;
    p.ensure_grad();
    p.grad += Eigen::Map<const Matrix<S>>(self.grad.data(), p.value.rows(), p.value.cols());
  });
}

// Sum over positions of -log softmax(logits_row_t)[target_t].
template <class S> Tensor<S> sequence_nll_rows(const Tensor<S>& logits, const std::vector<int>& targets) {
  require(static_cast<Index>(targets.size()) == logits.rows(),
          "sequence_nll: target count " + std::to_string(targets.size()) + " != logit rows " +
              std::to_string(logits.rows()));
  const Index n = logits.rows(), v = logits.cols();
  S total = S(0);
  Matrix<S> probs(n, v);
  for (Index t = 0; t < n; ++t) {
    require(targets[t] >= 0 && targets[t] < v,
            "sequence_nll: target index " + std::to_string(targets[t]) + " out of range [0," +
                std::to_string(v) + ")");
    const auto r = logits.value().row(t).array();
    const S m = r.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (r - m).exp();
    const S z = e.sum();
    probs.row(t) = (e / z).matrix();
    total -= (r(targets[t]) - m - std::log(z));
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total;
  return make_op<S>(std::move(out), {logits}, [probs = std::move(probs), targets](TensorNode<S>& self) {
    Matrix<S> g = probs * self.grad(0, 0);
    for (Index t = 0; t < g.rows(); ++t) g(t, targets[t]) -= self.grad(0, 0);
    pull_into(self, 0, g);
  });
}

// Same loss over a list of per-position logit vectors.
template <class S> Tensor<S> sequence_nll(const std::vector<Tensor<S>>& logits, const std::vector<int>& targets) {
  require(logits.size() == targets.size(),
          "sequence_nll: " + std::to_string(logits.size()) + " logit vectors vs " +
              std::to_string(targets.size()) + " targets");
  S total = S(0);
  std::vector<Vector<S>> probs(logits.size());
  for (size_t t = 0; t < logits.size(); ++t) {
    require(logits[t].cols() == 1, "sequence_nll: logits must be column vectors");
    const Index v = logits[t].rows();
    require(targets[t] >= 0 && targets[t] < v,
            "sequence_nll: target index " + std::to_string(targets[t]) + " out of range [0," +
                std::to_string(v) + ")");
    const auto r = logits[t].value().col(0).array();
    const S m = r.maxCoeff();
    Eigen::Array<S, Eigen::Dynamic, 1> e = (r - m).exp();
    const S z = e.sum();
    probs[t] = (e / z).matrix();
    total -= (r(targets[t]) - m - std::log(z));
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total;
  return make_op<S>(std::move(out), logits, [probs = std::move(probs), targets](TensorNode<S>& self) {
    for (size_t t = 0; t < self.parents.size(); ++t) {
      if (!self.parents[t]->on_grad_path) continue;
      Vector<S> g = probs[t] * self.grad(0, 0);
      g(targets[t]) -= self.grad(0, 0);
      self.parents[t]->accumulate(g);
    }
  });
}

}  // namespace stacklab

#pragma once

#include "stacklab/tensor.hpp"

#include <vector>

namespace stacklab {

// Superposition stack: the stack after t steps is a (t+1) x m matrix whose
// row i is the i-th element from the top; row updates interpolate the pushed,
// unchanged, and popped variants of the matrix by the softmax action weights.
template <class S> struct SupStackState {
  Tensor<S> mat;  // (t+1) x m

  static SupStackState initial(Index m) { return {Tensor<S>::zeros(1, m)}; }
  Index steps() const { return mat.rows() - 1; }
  Index width() const { return mat.cols(); }

  // Reading of the current stack: the top row.
  Tensor<S> reading() const { return row(mat, 0); }
};

// One differentiable update. `logits` are the (push, noop, pop) action logits;
// `pushed` is the vector written by the push component, entries in (0,1).
template <class S>
SupStackState<S> sup_step(const SupStackState<S>& state, const Tensor<S>& logits, const Tensor<S>& pushed) {
  require(logits.rows() == 3 && logits.cols() == 1, "sup_step: logits must be a 3-vector");
  require(pushed.rows() == state.width() && pushed.cols() == 1,
          "sup_step: pushed width " + std::to_string(pushed.rows()) + " != stack width " +
              std::to_string(state.width()));
  Tensor<S> actions = softmax(logits);
  const Index r = state.mat.rows(), m = state.mat.cols();
  const auto& Sv = state.mat.value();
  const S p = actions.value()(0, 0), n = actions.value()(1, 0), o = actions.value()(2, 0);

  Matrix<S> out(r + 1, m);
  out.row(0) = p * pushed.value().transpose() + n * Sv.row(0);
  if (r >= 2) out.row(0) += o * Sv.row(1);
  for (Index i = 1; i <= r; ++i) {
    out.row(i) = p * Sv.row(i - 1);
    if (i <= r - 1) out.row(i) += n * Sv.row(i);
    if (i + 1 <= r - 1) out.row(i) += o * Sv.row(i + 1);
  }

  Tensor<S> next = make_op<S>(std::move(out), {state.mat, actions, pushed}, [](TensorNode<S>& self) {
    const auto& Sv = self.parents[0]->value;
    const auto& av = self.parents[1]->value;
    const auto& vv = self.parents[2]->value;
    const Index r = Sv.rows();
    const auto& G = self.grad;

    Matrix<S> dS = Matrix<S>::Zero(r, Sv.cols());
    for (Index j = 0; j < r; ++j) {
      dS.row(j) = av(0, 0) * G.row(j + 1) + av(1, 0) * G.row(j);
      if (j >= 1) dS.row(j) += av(2, 0) * G.row(j - 1);
    }
    pull_into(self, 0, dS);

    Matrix<S> da(3, 1);
    S dp = G.row(0).dot(vv.col(0));
    for (Index i = 1; i <= r; ++i) dp += G.row(i).dot(Sv.row(i - 1));
    S dn = 0;
    for (Index i = 0; i <= r - 1; ++i) dn += G.row(i).dot(Sv.row(i));
    S dpop = 0;
    for (Index i = 0; i + 1 <= r - 1; ++i) dpop += G.row(i).dot(Sv.row(i + 1));
    da << dp, dn, dpop;
    pull_into(self, 1, da);

    pull_into(self, 2, Matrix<S>(av(0, 0) * G.row(0).transpose()));
  });
  return {next};
}

// Exhaustive reference for the reading after t steps. Enumerates one action
// per step over all 3^t sequences; a pop with no pushed element on the stack
// leaves the stack unchanged, and an exposed bottom reads as the zero vector.
// This is the run-set convention under which the normalized run sum equals
// the matrix-update semantics of sup_step exactly (the total weight is 1).
template <class S>
Vector<S> sup_reading_oracle(const std::vector<Vector<S>>& action_probs, const std::vector<Vector<S>>& pushed) {
  require(action_probs.size() == pushed.size() && !pushed.empty(),
          "sup_reading_oracle: need one action vector and one pushed vector per step");
  const Index t = static_cast<Index>(pushed.size());
  const Index m = pushed[0].rows();
  Vector<long double> numer = Vector<long double>::Zero(m);
  long double denom = 0.0L;

  std::vector<Index> stack;  // indices of live pushed vectors, top at back
  std::function<void(Index, long double)> walk = [&](Index step, long double w) {
    if (step == t) {
      denom += w;
      if (!stack.empty()) numer += w * pushed[stack.back()].template cast<long double>();
      return;
    }
    const auto& a = action_probs[step];
    // push
    stack.push_back(step);
    walk(step + 1, w * static_cast<long double>(a(0)));
    stack.pop_back();
    // noop
    walk(step + 1, w * static_cast<long double>(a(1)));
    // pop (no-op when nothing pushed)
    if (!stack.empty()) {
      const Index kept = stack.back();
      stack.pop_back();
      walk(step + 1, w * static_cast<long double>(a(2)));
      stack.push_back(kept);
    } else {
      walk(step + 1, w * static_cast<long double>(a(2)));
    }
  };
  walk(0, 1.0L);
  require(denom > 0.0L, "sup_reading_oracle: degenerate zero total run weight");
  return (numer / denom).template cast<S>();
}

// Literal push-run enumeration: runs start with a push at any step i <= t,
// cover steps i..t, are weighted by the covered steps only, and may never pop
// when no pushed element is on the stack. The weight-1 empty run (bottom
// exposed, zero reading) is included; it is the image of the all-replace VPDA
// run under the superposition-as-VPDA reduction. Note this differs from
// sup_reading_oracle's normalization; see the project notes on conventions.
template <class S>
Vector<S> sup_reading_push_runs(const std::vector<Vector<S>>& action_probs,
                                const std::vector<Vector<S>>& pushed) {
  require(action_probs.size() == pushed.size() && !pushed.empty(),
          "sup_reading_push_runs: need one action vector and one pushed vector per step");
  const Index t = static_cast<Index>(pushed.size());
  const Index m = pushed[0].rows();
  Vector<long double> numer = Vector<long double>::Zero(m);
  long double denom = 1.0L;  // the empty run

  std::vector<Index> stack;
  std::function<void(Index, long double)> walk = [&](Index step, long double w) {
    if (step == t) {
      denom += w;
      if (!stack.empty()) numer += w * pushed[stack.back()].template cast<long double>();
      return;
    }
    const auto& a = action_probs[step];
    stack.push_back(step);
    walk(step + 1, w * static_cast<long double>(a(0)));
    stack.pop_back();
    walk(step + 1, w * static_cast<long double>(a(1)));
    if (!stack.empty()) {
      const Index kept = stack.back();
      stack.pop_back();
      walk(step + 1, w * static_cast<long double>(a(2)));
      stack.push_back(kept);
    }
  };
  // Runs begin with a push at any start step i.
  for (Index i = 0; i < t; ++i) {
    stack.push_back(i);
    walk(i + 1, static_cast<long double>(action_probs[i](0)));
    stack.pop_back();
  }
  return (numer / denom).template cast<S>();
}

// Discrete stack simulation for saturation tests: one chosen action per step.
enum class SupAction { push = 0, noop = 1, pop = 2 };

template <class S>
Vector<S> sup_discrete_top(const std::vector<SupAction>& actions, const std::vector<Vector<S>>& pushed) {
  std::vector<Index> stack;
  for (size_t s = 0; s < actions.size(); ++s) {
    switch (actions[s]) {
      case SupAction::push: stack.push_back(static_cast<Index>(s)); break;
      case SupAction::noop: break;
      case SupAction::pop:
        if (!stack.empty()) stack.pop_back();
        break;
    }
  }
  if (stack.empty()) return Vector<S>::Zero(pushed[0].rows());
  return pushed[stack.back()];
}

}  // namespace stacklab

#pragma once

#include "stacklab/tensor.hpp"

#include <functional>
#include <ostream>
#include <vector>

namespace stacklab {

// Differentiable vector pushdown automaton (dVPDA). States Q = {0..|Q|-1}
// with start state 0; stack alphabet Gamma = {0..|Gamma|-1} with bottom
// symbol 0. Stack elements pair a symbol with a payload vector in (0,1)^m;
// the bottom element carries a learned vector v0 and can be replaced but
// never popped.

enum class VpdaActionKind { push = 0, replace = 1, pop = 2 };

struct VpdaTransition {
  VpdaActionKind kind;
  int state, top;        // (q, x): current state and observed top symbol
  int next_state;        // r
  int pushed_symbol;     // y for push/replace; unused for pop
};

// Canonical bijection between action-logit positions and transitions:
// push block, then replace block, then pop block, each lexicographic in
// (q, x, r, y) (pop omits y). Total 2|Q|^2|Gamma|^2 + |Q|^2|Gamma|.
struct VpdaLayout {
  int num_states = 1;
  int num_symbols = 1;

  int configs() const { return num_states * num_symbols; }
  int config(int q, int x) const { return q * num_symbols + x; }
  int num_actions() const {
    const int c = configs();
    return 2 * c * c + c * num_states;
  }
  int push_offset() const { return 0; }
  int replace_offset() const { return configs() * configs(); }
  int pop_offset() const { return 2 * configs() * configs(); }

  int to_index(const VpdaTransition& t) const {
    const int from = config(t.state, t.top);
    switch (t.kind) {
      case VpdaActionKind::push: return push_offset() + from * configs() + config(t.next_state, t.pushed_symbol);
      case VpdaActionKind::replace:
        return replace_offset() + from * configs() + config(t.next_state, t.pushed_symbol);
      case VpdaActionKind::pop: return pop_offset() + from * num_states + t.next_state;
    }
    return -1;
  }

  VpdaTransition from_index(int i) const {
    require(i >= 0 && i < num_actions(), "VpdaLayout::from_index: index out of range");
    const int c = configs();
    VpdaTransition t{};
    if (i < replace_offset() || (i >= replace_offset() && i < pop_offset())) {
      t.kind = i < replace_offset() ? VpdaActionKind::push : VpdaActionKind::replace;
      const int j = i % (c * c);
      const int from = j / c, to = j % c;
      t.state = from / num_symbols;
      t.top = from % num_symbols;
      t.next_state = to / num_symbols;
      t.pushed_symbol = to % num_symbols;
    } else {
      t.kind = VpdaActionKind::pop;
      const int j = i - pop_offset();
      const int from = j / num_states;
      t.state = from / num_symbols;
      t.top = from % num_symbols;
      t.next_state = j % num_states;
      t.pushed_symbol = -1;
    }
    return t;
  }
};

namespace detail {

// out[p, (r,y)] = logsumexp_s( A[p, (s,y)] + E[(s,y), r] ): closes an
// excursion above an element whose symbol y survives, combining the weight of
// the span that created the element with the excursion-plus-pop weight.
template <class S>
Tensor<S> log_excursion_combine(const Tensor<S>& A, const Tensor<S>& E, const VpdaLayout& lay) {
  const int Q = lay.num_states, G = lay.num_symbols, C = lay.configs();
  require(A.cols() == C && E.rows() == C && E.cols() == Q, "log_excursion_combine: bad shapes");
  const Index P = A.rows();
  Matrix<S> out(P, C);
  for (Index p = 0; p < P; ++p)
    for (int y = 0; y < G; ++y)
      for (int r = 0; r < Q; ++r) {
        S mx = neg_inf<S>();
        for (int s = 0; s < Q; ++s) mx = std::max(mx, A.value()(p, s * G + y) + E.value()(s * G + y, r));
        S acc = S(0);
        if (!(std::isinf(mx) && mx < S(0)))
          for (int s = 0; s < Q; ++s) acc += std::exp(A.value()(p, s * G + y) + E.value()(s * G + y, r) - mx);
        out(p, r * G + y) = (std::isinf(mx) && mx < S(0)) ? neg_inf<S>() : mx + std::log(acc);
      }
  return make_op<S>(std::move(out), {A, E}, [lay](TensorNode<S>& self) {
    const int Q = lay.num_states, G = lay.num_symbols, C = lay.configs();
    const auto& Av = self.parents[0]->value;
    const auto& Ev = self.parents[1]->value;
    Matrix<S> dA = Matrix<S>::Zero(Av.rows(), C), dE = Matrix<S>::Zero(C, Q);
    for (Index p = 0; p < Av.rows(); ++p)
      for (int y = 0; y < G; ++y)
        for (int r = 0; r < Q; ++r) {
          const S o = self.value(p, r * G + y);
          if (std::isinf(o) && o < S(0)) continue;
          const S g = self.grad(p, r * G + y);
          if (g == S(0)) continue;
          for (int s = 0; s < Q; ++s) {
            const S w = std::exp(Av(p, s * G + y) + Ev(s * G + y, r) - o);
            dA(p, s * G + y) += g * w;
            dE(s * G + y, r) += g * w;
          }
        }
    pull_into(self, 0, dA);
    pull_into(self, 1, dE);
  });
}

}  // namespace detail

struct NumericalFailure : std::runtime_error {
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

// The dVPDA chart. All scalar run weights live in log space; vector run sums
// are kept as per-coordinate log magnitudes (every summed quantity is
// nonnegative). gamma[i->t][(q,x),(r,y)] weights runs over steps i+1..t in
// which one element with symbol y sits on an untouched (q,x)-exposed base;
// zeta mirrors gamma with the top element's payload attached; beta tracks
// bottom-only runs; alpha tracks all runs.
template <class S> struct NdStackState {
  VpdaLayout layout;
  Index elem_width = 0;
  Index t = 0;
  Tensor<S> log_v0;  // (m), log of the bottom vector

  std::vector<Tensor<S>> beta;                         // beta[k], (1 x C)
  std::vector<Tensor<S>> alpha;                        // alpha[k], (1 x C)
  std::vector<std::vector<Tensor<S>>> gamma;           // gamma[i][j] = span i -> i+1+j
  std::vector<std::vector<std::vector<Tensor<S>>>> zeta;  // zeta[i][j][coord]
  Tensor<S> reading;       // (C*m), slice-major: entry (r,y)*m + coord
  Tensor<S> log_total;     // scalar: log denominator at step t

  const Tensor<S>& gamma_at(Index i, Index j) const { return gamma[i][j - i - 1]; }
  const std::vector<Tensor<S>>& zeta_at(Index i, Index j) const { return zeta[i][j - i - 1]; }
};

template <class S> Tensor<S> nd_compute_reading(NdStackState<S>& st) {
  const int C = st.layout.configs();
  const Index m = st.elem_width;
  const Index t = st.t;
  Tensor<S> alpha_col = make_op<S>(Matrix<S>(st.alpha[t].value().transpose()), {st.alpha[t]},
                                   [](TensorNode<S>& self) { pull_into(self, 0, self.grad.transpose()); });
  st.log_total = logsumexp(alpha_col);
  if (std::isinf(st.log_total.value()(0, 0)) && st.log_total.value()(0, 0) < S(0))
    throw NumericalFailure("nd_step: total run weight underflowed to zero at step " + std::to_string(t));
  std::vector<Tensor<S>> coord_rows;
  coord_rows.reserve(m);
  for (Index c = 0; c < m; ++c) {
    std::vector<Tensor<S>> terms;
    terms.push_back(add_scalar(st.beta[t], element(st.log_v0, c, 0)));
    for (Index i = 0; i < t; ++i) terms.push_back(log_matmul(st.alpha[i], st.zeta_at(i, t)[c]));
    Tensor<S> nu = logaddexp_many(terms);
    coord_rows.push_back(stacklab::exp(sub_scalar(nu, st.log_total)));
  }
  // (m x C) stacked rows; column-major flattening yields slice-major order.
  st.reading = flatten_cm(vstack_rows(coord_rows));
  return st.reading;
}

template <class S>
NdStackState<S> nd_initial_state(const VpdaLayout& lay, Index m, const Tensor<S>& log_v0) {
  require(log_v0.rows() == m && log_v0.cols() == 1, "nd_initial_state: log_v0 must be an m-vector");
  NdStackState<S> st;
  st.layout = lay;
  st.elem_width = m;
  st.log_v0 = log_v0;
  Matrix<S> b0 = Matrix<S>::Constant(1, lay.configs(), neg_inf<S>());
  b0(0, 0) = S(0);  // state q0 with bottom symbol on top
  st.beta.push_back(Tensor<S>::from_matrix(b0));
  st.alpha.push_back(st.beta[0]);
  nd_compute_reading(st);
  return st;
}

// Convenience: v0 given in linear space (0,1)^m.
template <class S>
NdStackState<S> nd_initial_state_linear(const VpdaLayout& lay, Index m, const Vector<S>& v0) {
  Matrix<S> lv(m, 1);
  for (Index i = 0; i < m; ++i) lv(i, 0) = std::log(v0(i));
  return nd_initial_state<S>(lay, m, Tensor<S>::from_matrix(lv));
}

// One dVPDA update. `logits` has layout VpdaLayout (transition weights are
// exp(logits)); `pushed` is the payload in (0,1)^m written by push actions.
// Returns the new reading, the concatenation over configs (r,y) of the
// normalized run-vector slices of Eq-style run sums.
template <class S>
Tensor<S> nd_step(NdStackState<S>& st, const Tensor<S>& logits, const Tensor<S>& pushed) {
  const VpdaLayout& lay = st.layout;
  const int C = lay.configs(), Q = lay.num_states;
  const Index m = st.elem_width;
  require(logits.rows() == lay.num_actions() && logits.cols() == 1,
          "nd_step: logits must have " + std::to_string(lay.num_actions()) + " entries");
  require(pushed.rows() == m && pushed.cols() == 1, "nd_step: pushed must be an m-vector");

  const Index t = st.t + 1;
  Tensor<S> push_block = block_rowmajor(logits, lay.push_offset(), C, C);
  Tensor<S> repl_block = block_rowmajor(logits, lay.replace_offset(), C, C);
  Tensor<S> pop_block = block_rowmajor(logits, lay.pop_offset(), C, Q);
  Tensor<S> log_pushed = stacklab::log(pushed);

  // Excursion-closure tables E[k] = log_matmul(gamma[k -> t-1], pop_t).
  std::vector<Tensor<S>> closure(static_cast<size_t>(std::max<Index>(t - 1, 0)));
  for (Index k = 0; k + 1 <= t - 2 + 1 && k <= t - 2; ++k)
    closure[k] = log_matmul(st.gamma_at(k, t - 1), pop_block);

  // New spans ending at t.
  if (static_cast<Index>(st.gamma.size()) < t) {
    st.gamma.resize(t);
    st.zeta.resize(t);
  }
  for (Index i = t - 1; i >= 0; --i) {
    Tensor<S> g;
    std::vector<Tensor<S>> z(m);
    if (i == t - 1) {
      g = push_block;
      for (Index c = 0; c < m; ++c) z[c] = add_scalar(push_block, element(log_pushed, c, 0));
    } else {
      std::vector<Tensor<S>> gterms, zterms;
      gterms.push_back(log_matmul(st.gamma_at(i, t - 1), repl_block));
      for (Index k = i + 1; k <= t - 2; ++k)
        gterms.push_back(detail::log_excursion_combine(st.gamma_at(i, k), closure[k], lay));
      g = logaddexp_many(gterms);
      for (Index c = 0; c < m; ++c) {
        zterms.clear();
        zterms.push_back(log_matmul(st.zeta_at(i, t - 1)[c], repl_block));
        for (Index k = i + 1; k <= t - 2; ++k)
          zterms.push_back(detail::log_excursion_combine(st.zeta_at(i, k)[c], closure[k], lay));
        z[c] = logaddexp_many(zterms);
      }
    }
    st.gamma[i].push_back(g);
    st.zeta[i].push_back(std::move(z));
  }

  // Bottom-only runs.
  std::vector<Tensor<S>> bterms;
  bterms.push_back(log_matmul(st.beta[t - 1], repl_block));
  for (Index k = 0; k <= t - 2; ++k)
    bterms.push_back(detail::log_excursion_combine(st.beta[k], closure[k], lay));
  st.beta.push_back(logaddexp_many(bterms));

  // All runs ending at t, by exposed (state, symbol).
  std::vector<Tensor<S>> aterms;
  aterms.push_back(st.beta[t]);
  for (Index i = 0; i < t; ++i) aterms.push_back(log_matmul(st.alpha[i], st.gamma_at(i, t)));
  st.alpha.push_back(logaddexp_many(aterms));

  st.t = t;
  return nd_compute_reading(st);
}

// ---------------------------------------------------------------------------
// Brute-force references
// ---------------------------------------------------------------------------

// Literal deterministic simulation of a (symbol, vector) stack under one
// chosen transition per step. Contract violations name the failing step.
template <class S> struct VpdaConfig {
  int state = 0;
  std::vector<std::pair<int, Vector<S>>> stack;  // bottom first
};

template <class S>
VpdaConfig<S> discrete_vpda_simulate(const std::vector<VpdaTransition>& run,
                                     const std::vector<Vector<S>>& pushed, const VpdaLayout& lay,
                                     const Vector<S>& v0) {
  VpdaConfig<S> c;
  c.state = 0;
  c.stack.push_back({0, v0});
  for (size_t s = 0; s < run.size(); ++s) {
    const auto& tr = run[s];
    const auto where = " at step " + std::to_string(s + 1);
    require(tr.state == c.state, "discrete_vpda_simulate: state mismatch" + where);
    require(tr.top == c.stack.back().first, "discrete_vpda_simulate: top symbol mismatch" + where);
    switch (tr.kind) {
      case VpdaActionKind::push:
        c.stack.push_back({tr.pushed_symbol, pushed[s]});
        break;
      case VpdaActionKind::replace:
        c.stack.back().first = tr.pushed_symbol;  // payload preserved
        break;
      case VpdaActionKind::pop:
        require(c.stack.size() >= 2, "discrete_vpda_simulate: pop would empty the stack" + where);
        c.stack.pop_back();
        break;
    }
    c.state = tr.next_state;
    (void)lay;
  }
  return c;
}

// Exhaustive enumeration of every valid run (one transition per step, never
// emptying the stack; replacing the bottom is allowed). Weights are products
// of exp(logit); the result evaluates the normalized per-(state,symbol)
// run-vector sums exactly. When `unit_replace_before_first_push` is set,
// replace transitions taken before the run's first push contribute weight 1
// instead of their own weight (the superposition-stack reduction).
template <class S>
Vector<S> nd_reading_oracle(const std::vector<Vector<S>>& logits, const std::vector<Vector<S>>& pushed,
                            const VpdaLayout& lay, const Vector<S>& v0,
                            bool unit_replace_before_first_push = false) {
  require(logits.size() == pushed.size(), "nd_reading_oracle: one logit vector per step required");
  const Index t = static_cast<Index>(logits.size());
  const int Q = lay.num_states, G = lay.num_symbols, C = lay.configs();
  const Index m = v0.rows();
  Matrix<long double> numer = Matrix<long double>::Zero(C, m);
  long double denom = 0.0L;

  std::vector<std::pair<int, Index>> stack;  // (symbol, pushed-step index); -1 = bottom
  stack.push_back({0, -1});
  std::function<void(Index, int, long double, bool)> walk = [&](Index step, int state, long double w,
                                                                bool pushed_yet) {
    if (step == t) {
      const int cfg = lay.config(state, stack.back().first);
      denom += w;
      const Vector<S>& top = stack.back().second < 0 ? v0 : pushed[stack.back().second];
      for (Index c = 0; c < m; ++c) numer(cfg, c) += w * static_cast<long double>(top(c));
      return;
    }
    const int x = stack.back().first;
    const auto& lg = logits[step];
    for (int r = 0; r < Q; ++r) {
      for (int y = 0; y < G; ++y) {
        // push
        {
          const int idx = lay.to_index({VpdaActionKind::push, state, x, r, y});
          const long double tw = expl(static_cast<long double>(lg(idx)));
          stack.push_back({y, step});
          walk(step + 1, r, w * tw, true);
          stack.pop_back();
        }
        // replace
        {
          const int idx = lay.to_index({VpdaActionKind::replace, state, x, r, y});
          long double tw = expl(static_cast<long double>(lg(idx)));
          if (unit_replace_before_first_push && !pushed_yet) tw = 1.0L;
          const auto kept = stack.back();
          stack.back().first = y;
          walk(step + 1, r, w * tw, pushed_yet);
          stack.back() = kept;
        }
      }
      // pop
      if (stack.size() >= 2) {
        const int idx = lay.to_index({VpdaActionKind::pop, state, x, r, -1});
        const long double tw = expl(static_cast<long double>(lg(idx)));
        const auto kept = stack.back();
        stack.pop_back();
        walk(step + 1, r, w * tw, pushed_yet);
        stack.push_back(kept);
      }
    }
  };
  walk(0, 0, 1.0L, false);
  require(denom > 0.0L, "nd_reading_oracle: zero total run weight");

  Vector<S> reading(C * m);
  for (int cfg = 0; cfg < C; ++cfg)
    for (Index c = 0; c < m; ++c)
      reading(cfg * m + c) = static_cast<S>(numer(cfg, c) / denom);
  return reading;
}

// Tab-separated chart dump: step, span, base config, top config, log weight.
template <class S> void dump_chart(const NdStackState<S>& st, std::ostream& out) {
  const int C = st.layout.configs(), G = st.layout.num_symbols;
  auto cfg_name = [&](int c) {
    return "q" + std::to_string(c / G) + ",x" + std::to_string(c % G);
  };
  for (Index k = 0; k <= st.t; ++k)
    for (int c = 0; c < C; ++c) {
      out << k << "\tbeta\t-\t(" << cfg_name(c) << ")\t" << st.beta[k].value()(0, c) << "\n";
      out << k << "\talpha\t-\t(" << cfg_name(c) << ")\t" << st.alpha[k].value()(0, c) << "\n";
    }
  for (Index i = 0; i + 1 <= st.t; ++i)
    for (Index j = i + 1; j <= st.t; ++j) {
      const auto& g = st.gamma_at(i, j);
      for (int a = 0; a < C; ++a)
        for (int b = 0; b < C; ++b)
          out << j << "\tgamma\t" << i << "->" << j << "\t(" << cfg_name(a) << ")=>(" << cfg_name(b)
              << ")\t" << g.value()(a, b) << "\n";
    }
}

}  // namespace stacklab

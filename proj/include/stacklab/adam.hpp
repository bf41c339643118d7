#pragma once

#include "stacklab/tensor.hpp"

#include <cmath>
#include <vector>

namespace stacklab {

struct DivergedError : std::runtime_error {
  explicit DivergedError(const std::string& what) : std::runtime_error(what) {}
};

template <class S> struct AdamState {
  std::vector<Matrix<S>> m;
  std::vector<Matrix<S>> v;
  long step = 0;

  static AdamState zeros_like(const std::vector<Tensor<S>>& params) {
    AdamState st;
    for (const auto& p : params) {
      st.m.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
      st.v.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
    }
    return st;
  }
};

// Scales all gradients by threshold/norm when the global L2 norm exceeds the
// threshold. Returns the factor applied (1 when unchanged).
template <class S> double clip_global_norm(std::vector<Matrix<S>>& grads, double threshold = 10.0) {
  require(threshold > 0.0, "clip_global_norm: threshold must be positive");
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.template cast<double>().squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm <= threshold) return 1.0;
  const double factor = threshold / norm;
  for (auto& g : grads) g *= S(factor);
  return factor;
}

// Bias-corrected Adam update, in place. Throws DivergedError on non-finite
// gradients without touching the parameters.
template <class S>
void adam_step(std::vector<Tensor<S>>& params, const std::vector<Matrix<S>>& grads, AdamState<S>& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  require(params.size() == grads.size() && params.size() == state.m.size(),
          "adam_step: parameter/gradient/state count mismatch");
  for (size_t i = 0; i < grads.size(); ++i) {
    require(grads[i].rows() == params[i].rows() && grads[i].cols() == params[i].cols(),
            "adam_step: gradient shape mismatch at parameter " + std::to_string(i));
    if (!grads[i].allFinite())
      throw DivergedError("adam_step: non-finite gradient at parameter " + std::to_string(i));
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = S(beta1) * m + S(1 - beta1) * grads[i];
    v = S(beta2) * v + S(1 - beta2) * grads[i].cwiseProduct(grads[i]);
    auto& value = params[i].mutable_value();
    value.array() -= S(lr) * (m.array() / S(bc1)) /
                     ((v.array() / S(bc2)).sqrt() + S(eps));
  }
}

}  // namespace stacklab

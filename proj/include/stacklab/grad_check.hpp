#pragma once

#include "stacklab/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace stacklab {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "param[i,j]" of the worst coordinate
  bool finite = true;
};

// Central-difference gradient check of a scalar function of the given
// parameters. `f` must be deterministic (fix all RngStreams) and re-run the
// forward pass on each call. Relative error per coordinate is
// |analytic - numeric| / max(1e-8, |numeric|).
template <class S>
GradCheckReport finite_difference_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> params,
                                        double step = 1e-5) {
  GradCheckReport rep;
  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = f();
  backward(loss);
  std::vector<Matrix<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  NoGradGuard ng;
  for (size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k].mutable_value();
    for (Index j = 0; j < value.cols(); ++j)
      for (Index i = 0; i < value.rows(); ++i) {
        const S keep = value(i, j);
        value(i, j) = keep + S(step);
        const double up = static_cast<double>(f().scalar_value());
        value(i, j) = keep - S(step);
        const double dn = static_cast<double>(f().scalar_value());
        value(i, j) = keep;
        const double numeric = (up - dn) / (2.0 * step);
        const double a = static_cast<double>(analytic[k](i, j));
        if (!std::isfinite(numeric) || !std::isfinite(a)) {
          rep.finite = false;
          rep.worst = "param" + std::to_string(k) + "[" + std::to_string(i) + "," + std::to_string(j) + "]";
          rep.max_rel_error = std::numeric_limits<double>::infinity();
          return rep;
        }
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
        if (rel > rep.max_rel_error) {
          rep.max_rel_error = rel;
          rep.worst = "param" + std::to_string(k) + "[" + std::to_string(i) + "," + std::to_string(j) + "]";
        }
      }
  }
  return rep;
}

}  // namespace stacklab

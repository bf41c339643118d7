#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace stacklab {

using Index = Eigen::Index;

template <class S> using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S> using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S> using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S> using ArrayXX = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;

// Contract failures are thrown, not asserted: callers (CLI, tests) report them.
struct ContractViolation : std::invalid_argument {
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

[[noreturn]] inline void fail_contract(const std::string& what) { throw ContractViolation(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) fail_contract(what);
}

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << "(" << rows << "x" << cols << ")";
  return os.str();
}

template <class S> constexpr S neg_inf() { return -std::numeric_limits<S>::infinity(); }

}  // namespace stacklab

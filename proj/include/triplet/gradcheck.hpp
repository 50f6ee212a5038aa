#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "triplet/autograd.hpp"

namespace triplet {

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  std::vector<bool> kink;  ///< element sits at a non-differentiable point
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::size_t kinks = 0;
  bool passed = false;
};

struct GradCheckOptions {
  /// Central-difference step. 5e-3 keeps float32 rounding of the forward
  /// pass below the 1e-3 tolerance while truncation error stays O(1e-5).
  double step = 5e-3;
  double tol = 1e-3;
  /// Check at most this many elements (evenly strided); 0 checks all.
  std::size_t max_elements = 0;
  /// Seed for the random projection applied to non-scalar outputs.
  std::uint64_t seed = 7;
};

/// Compares the tape gradient of f at x with central finite differences.
///
/// Non-scalar outputs are reduced as sum_j c_j y_j with fixed random c_j,
/// accumulated in double. Per-element error is
/// |a - n| / max(|a|, |n|, 0.1 * max_k |a_k|), so elements whose gradient is
/// negligible relative to the largest one are judged on an absolute scale.
/// Elements whose one-sided differences disagree strongly, or whose central
/// difference shifts by more than tol when the step is halved, are flagged as
/// kinks and excluded from the failure count.
GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x,
                           const GradCheckOptions& opt = {});

}  // namespace triplet

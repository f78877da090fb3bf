#pragma once

#include <cstddef>
#include <functional>
#include <set>
#include <string>

#include "eptlab/tensor.hpp"

namespace eptlab {

struct Evaluation {
  double loss = 0.0;
  GradientMap gradients;
};

/// Deterministic scalar objective over a parameter store, returning the loss
/// and the analytic gradients of its trainable parameters.
using Objective = std::function<Evaluation(const ParameterStore&)>;
/// Loss alone, for the perturbed evaluations; must agree bit-for-bit with
/// the Objective's loss.
using LossOnly = std::function<double(const ParameterStore&)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Central-difference gradient check over every scalar of the `trainable`
/// parameters. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Throws OracleError if two base evaluations disagree.
/// `threads` > 1 splits the perturbations across worker threads.
GradCheckReport finite_diff_check(const Objective& f, const ParameterStore& params,
                                  const std::set<std::string>& trainable, double step, unsigned threads = 1);
GradCheckReport finite_diff_check(const Objective& f, const LossOnly& loss, const ParameterStore& params,
                                  const std::set<std::string>& trainable, double step, unsigned threads = 1);

}  // namespace eptlab

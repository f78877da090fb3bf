#pragma once

#include <functional>
#include <string>
#include <vector>

#include "eptlab/gradcheck.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/tensor.hpp"
#include "eptlab/vit.hpp"

namespace eptlab::cli {

using PromptedSoftmaxFn = std::function<Tensor(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way)>;

struct CheckContext {
  /// Implementation under test; swapped out by fault injection.
  PromptedSoftmaxFn prompted_softmax = [](const Tensor& k, const Tensor& p, EmbeddingWay w) {
    return eptlab::prompted_softmax(k, p, w);
  };
  unsigned threads = 1;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  /// Worst observed value of the checked quantity, compared against `limit`.
  double worst = 0.0;
  double limit = 0.0;
  std::string detail;
};

struct Check {
  std::string name;
  std::string summary;
  std::function<CheckResult(const CheckContext&)> run;
};

/// The invariant suite in execution order.
const std::vector<Check>& all_checks();

/// Prompted softmax with a sign fault (the ktq block enters negated), used to
/// confirm the suite catches a broken implementation.
Tensor sign_fault_prompted_softmax(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way);

/// One line per check: status, name, worst value and limit.
std::string format_check(const CheckResult& r);

/// Methods covered by the gradient check on the tiny config.
std::vector<PeftMethod> gradient_check_methods();

/// Finite-difference check of every trainable scalar of `method` on a
/// two-sample cross-entropy objective. Trainable parameters are moved off
/// their initial values first so zero-initialized factors get generic
/// gradients.
GradCheckReport method_gradient_check(const BackboneConfig& cfg, const PeftMethod& method, unsigned threads);

inline constexpr double kGradStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

}  // namespace eptlab::cli

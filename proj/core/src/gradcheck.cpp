#include "eptlab/gradcheck.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <vector>

#include "eptlab/errors.hpp"

namespace eptlab {

namespace {

struct Coordinate {
  std::string name;
  std::size_t index;
};

}  // namespace

GradCheckReport finite_diff_check(const Objective& f, const ParameterStore& params,
                                  const std::set<std::string>& trainable, double step, unsigned threads) {
  return finite_diff_check(f, [&f](const ParameterStore& p) { return f(p).loss; }, params, trainable, step, threads);
}

GradCheckReport finite_diff_check(const Objective& f, const LossOnly& loss, const ParameterStore& params,
                                  const std::set<std::string>& trainable, double step, unsigned threads) {
  if (!(step > 0.0)) throw ContractError("finite-difference step must be positive");

  const Evaluation base = f(params);
  const Evaluation again = f(params);
  if (base.loss != again.loss || loss(params) != base.loss) {
    throw OracleError("objective is not deterministic: base evaluations differ");
  }

  std::vector<Coordinate> coords;
  for (const auto& name : trainable) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("gradient check: unknown parameter '" + name + "'");
    for (std::size_t i = 0; i < it->second.size(); ++i) coords.push_back({name, i});
  }

  std::vector<double> numeric(coords.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    ParameterStore local = params;
    for (std::size_t k = next++; k < coords.size(); k = next++) {
      double& theta = local.at(coords[k].name)[coords[k].index];
      const double original = theta;
      theta = original + step;
      const double up = loss(local);
      theta = original - step;
      const double down = loss(local);
      theta = original;
      numeric[k] = (up - down) / (2.0 * step);
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(coords.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  GradCheckReport report;
  report.checked = coords.size();
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto git = base.gradients.find(coords[k].name);
    const double analytic = git == base.gradients.end() ? 0.0 : git->second[coords[k].index];
    const double denom = std::max({std::abs(analytic), std::abs(numeric[k]), 1e-8});
    const double err = std::abs(analytic - numeric[k]) / denom;
    if (err > report.max_relative_error || k == 0) {
      report.max_relative_error = err;
      report.worst_parameter = coords[k].name;
      report.worst_index = coords[k].index;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric[k];
    }
  }
  return report;
}

}  // namespace eptlab

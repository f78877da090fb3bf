#pragma once

// Brute-force reference implementations. Deliberately naive: loops over
// indices with no shared code from the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "eptlab/autodiff.hpp"
#include "eptlab/gradcheck.hpp"
#include "eptlab/rng.hpp"
#include "eptlab/tensor.hpp"

namespace oracle {

using eptlab::Tensor;

inline Tensor random_matrix(std::size_t rows, std::size_t cols, eptlab::Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::matrix(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) + b(i, j);
  return out;
}

// Unshifted: fine for the moderate magnitudes used in tests.
inline Tensor softmax_columns(const Tensor& m) {
  Tensor out = Tensor::matrix(m.rows(), m.cols());
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) z += std::exp(m(i, j));
    for (std::size_t i = 0; i < m.rows(); ++i) out(i, j) = std::exp(m(i, j)) / z;
  }
  return out;
}

inline Tensor relu(const Tensor& m) {
  Tensor out = m;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor add_bias(const Tensor& m, const Tensor& bias) {
  Tensor out = Tensor::matrix(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) + bias[i];
  return out;
}

inline Tensor rows(const Tensor& m, std::size_t begin, std::size_t end) {
  Tensor out = Tensor::matrix(end - begin, m.cols());
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i - begin, j) = m(i, j);
  return out;
}

inline Tensor layer_norm_columns(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6) {
  Tensor out = Tensor::matrix(x.rows(), x.cols());
  const double d = static_cast<double>(x.rows());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
    mean /= d;
    for (std::size_t i = 0; i < x.rows(); ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= d;
    for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = gamma[i] * (x(i, j) - mean) / std::sqrt(var + eps) + beta[i];
  }
  return out;
}

/// Single-head-per-slice attention: sum over heads of V_h softmax(K_h^T Q_h),
/// heads stacked along rows.
inline Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, int heads) {
  const Tensor q = matmul(wq, x);
  Tensor k = matmul(wk, x);
  const Tensor v = matmul(wv, x);
  const std::size_t hd = x.rows() / static_cast<std::size_t>(heads);
  for (double& e : k.data()) e /= std::sqrt(static_cast<double>(hd));
  Tensor out = Tensor::matrix(x.rows(), x.cols());
  for (int h = 0; h < heads; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * hd;
    const Tensor a = softmax_columns(matmul(transpose(rows(k, b, b + hd)), rows(q, b, b + hd)));
    const Tensor o = matmul(rows(v, b, b + hd), a);
    for (std::size_t i = 0; i < hd; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(b + i, j) = o(i, j);
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// All-points average precision by enumerating every cut of the ranking.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  int positives = 0;
  for (std::size_t cut = 1; cut <= order.size(); ++cut) {
    if (!labels[order[cut - 1]]) continue;
    int hits = 0;
    for (std::size_t r = 0; r < cut; ++r) hits += labels[order[r]];
    total += static_cast<double>(hits) / static_cast<double>(cut);
    ++positives;
  }
  return total / positives;
}

/// Finite-difference check of a scalar graph built from named leaves.
inline eptlab::GradCheckReport graph_gradcheck(
    const eptlab::ParameterStore& params,
    const std::function<eptlab::Var(eptlab::Graph&, const std::vector<eptlab::Var>&)>& build, double step = 1e-5) {
  std::set<std::string> names;
  for (const auto& [name, _] : params) names.insert(name);
  const eptlab::Objective f = [&](const eptlab::ParameterStore& p) {
    eptlab::Graph g;
    std::vector<eptlab::Var> leaves;
    for (const auto& [name, _] : p) leaves.push_back(g.bind(p, name, names));
    const eptlab::Var loss = build(g, leaves);
    return eptlab::Evaluation{loss.value().item(), g.backward(loss)};
  };
  return eptlab::finite_diff_check(f, params, names, step);
}

}  // namespace oracle

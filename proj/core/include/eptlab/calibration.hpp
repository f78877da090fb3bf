#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "eptlab/peft.hpp"
#include "eptlab/tensor.hpp"

namespace eptlab {

using Vector = std::vector<double>;

struct LabeledFeatures {
  std::vector<Vector> features;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t dim() const { return features.empty() ? 0 : features.front().size(); }
  /// Throws AnalysisError on ragged vectors, out-of-range labels or empty classes.
  void validate() const;
};

struct ClassStatistics {
  int label = 0;
  std::size_t count = 0;
  Vector center;
  double center_norm = 0.0;
  Tensor scatter;  // (1/n_k) sum (x - c)(x - c)^T
  double trace = 0.0;
};

struct IntraClassReport {
  Tensor sigma_w;  // (1/N) sum over all classes
  double trace = 0.0;
  std::vector<ClassStatistics> classes;
  /// ||x_i - center(label_i)||_2, in input order.
  Vector deviation_norms;
};

IntraClassReport intra_class_distance(const LabeledFeatures& f);

/// Per-sample factors c_{k,i} and per-class center factors c_k.
struct ScalingFamily {
  Vector sample_factors;
  Vector center_factors;
};

/// c(x) = 1 / (1 + ||x||), anti-monotone and order-preserving in ||x||; the
/// center factor of class k is c(center_k).
ScalingFamily reciprocal_norm_scaling(const LabeledFeatures& f);

struct Lemma1Report {
  /// min over samples of c_k ||x_i - x̄_k|| - ||c_{k,i} x_i - c_k x̄_k||.
  double per_sample_margin = 0.0;
  std::size_t worst_sample = 0;
  /// min over classes of c_k^2 tr(Σ_k) - tr(Σ'_k), Σ' taken about c_k x̄_k.
  double trace_margin = 0.0;
  /// Same with Σ' about the empirical mean of the scaled samples (informational).
  double empirical_mean_trace_margin = 0.0;
  bool per_sample_holds = false;
  bool trace_holds = false;
  bool holds() const { return per_sample_holds && trace_holds; }
};

/// Checks the scaled intra-class bound for nonnegative features. Throws
/// PreconditionError when features are negative, factors leave [0,1], or a
/// pair within a class breaks anti-monotonicity or order preservation.
Lemma1Report check_lemma1(const LabeledFeatures& f, const ScalingFamily& s, double slack = 1e-9);

/// (1 + e^z) / (1 + e^z + e^{z p}), evaluated stably.
double prop1_factor(double z, double p);

struct Prop1Report {
  double c1 = 0.0;
  double c2 = 0.0;
  bool holds = false;
  /// max |closed form - prompted softmax norm ratio| over the two points.
  double ratio_discrepancy = 0.0;
};

/// Two-token, one-prompt-row case with prompt value z p. `holds` is the
/// ordering c1 >= c2 when z2 >= z1 (c2 >= c1 otherwise).
Prop1Report check_prop1(double z1, double z2, double p);

/// ||prompted column||_2 / ||plain column||_2 for u = [0, z], prompt [z p].
double prop1_norm_ratio(double z, double p);

/// Retained mass per column: sum e^u / (sum e^u + sum e^{p'}), with p' the
/// prompt block after the embedding-way transform. Cat ways only.
Vector measure_scaling_factors(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way);

struct PcaResult {
  std::vector<Vector> components;  // unit eigenvectors
  Vector eigenvalues;
  Vector explained_ratio;
  Vector mean;
  std::vector<Vector> projections;  // per sample, k coordinates
};

/// Mean-centered projection onto the top-k covariance eigenvectors, found by
/// power iteration with deflation. Sign convention: the largest-magnitude
/// entry of each component is positive.
PcaResult pca_project(const std::vector<Vector>& samples, int k, std::uint64_t seed = 0, double tol = 1e-10);

struct HistogramBin {
  double left = 0.0;
  double right = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max], last bin closed. A zero-width range
/// yields a single bin holding every value.
std::vector<HistogramBin> feature_histogram(const Vector& values, int bins);

std::string histogram_csv(const std::vector<HistogramBin>& bins);
std::string projection_csv(const PcaResult& pca, const std::vector<int>& labels);

}  // namespace eptlab

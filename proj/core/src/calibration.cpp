#include "eptlab/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "eptlab/errors.hpp"
#include "eptlab/io.hpp"
#include "eptlab/rng.hpp"

namespace eptlab {

namespace {

double norm2(const Vector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double log_sum_exp(const std::vector<double>& v) {
  double hi = -INFINITY;
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

std::vector<std::vector<std::size_t>> members_by_class(const LabeledFeatures& f) {
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(f.num_classes));
  for (std::size_t i = 0; i < f.labels.size(); ++i) members[static_cast<std::size_t>(f.labels[i])].push_back(i);
  return members;
}

}  // namespace

void LabeledFeatures::validate() const {
  if (features.size() != labels.size()) throw AnalysisError("feature and label counts differ");
  if (num_classes <= 0) throw AnalysisError("num_classes must be positive");
  const std::size_t d = dim();
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != d) throw AnalysisError("feature " + std::to_string(i) + " has a different dimension");
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw AnalysisError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " out of range");
    }
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t k = 0; k < counts.size(); ++k)
    if (counts[k] == 0) throw AnalysisError("class " + std::to_string(k) + " has no samples");
}

IntraClassReport intra_class_distance(const LabeledFeatures& f) {
  f.validate();
  const std::size_t d = f.dim();
  const double total = static_cast<double>(f.features.size());
  IntraClassReport report;
  report.sigma_w = Tensor::matrix(d, d);
  report.deviation_norms.assign(f.features.size(), 0.0);

  const auto members = members_by_class(f);
  for (std::size_t k = 0; k < members.size(); ++k) {
    ClassStatistics cs;
    cs.label = static_cast<int>(k);
    cs.count = members[k].size();
    cs.center.assign(d, 0.0);
    for (std::size_t i : members[k])
      for (std::size_t a = 0; a < d; ++a) cs.center[a] += f.features[i][a];
    for (double& v : cs.center) v /= static_cast<double>(cs.count);
    cs.center_norm = norm2(cs.center);
    cs.scatter = Tensor::matrix(d, d);
    Vector dev(d);
    for (std::size_t i : members[k]) {
      for (std::size_t a = 0; a < d; ++a) dev[a] = f.features[i][a] - cs.center[a];
      report.deviation_norms[i] = norm2(dev);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) cs.scatter(a, b) += dev[a] * dev[b];
    }
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        report.sigma_w(a, b) += cs.scatter(a, b) / total;
        cs.scatter(a, b) /= static_cast<double>(cs.count);
      }
    for (std::size_t a = 0; a < d; ++a) cs.trace += cs.scatter(a, a);
    report.classes.push_back(std::move(cs));
  }
  for (std::size_t a = 0; a < d; ++a) report.trace += report.sigma_w(a, a);
  return report;
}

ScalingFamily reciprocal_norm_scaling(const LabeledFeatures& f) {
  ScalingFamily s;
  for (const auto& x : f.features) s.sample_factors.push_back(1.0 / (1.0 + norm2(x)));
  const auto report = intra_class_distance(f);
  for (const auto& cs : report.classes) s.center_factors.push_back(1.0 / (1.0 + cs.center_norm));
  return s;
}

Lemma1Report check_lemma1(const LabeledFeatures& f, const ScalingFamily& s, double slack) {
  f.validate();
  const std::size_t m = f.features.size();
  if (s.sample_factors.size() != m || s.center_factors.size() != static_cast<std::size_t>(f.num_classes)) {
    throw PreconditionError("scaling family does not match the features");
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (double v : f.features[i])
      if (v < 0.0) throw PreconditionError("feature " + std::to_string(i) + " has a negative entry");
    const double c = s.sample_factors[i];
    if (!(c >= 0.0 && c <= 1.0)) throw PreconditionError("factor of sample " + std::to_string(i) + " outside [0,1]");
  }
  for (double c : s.center_factors)
    if (!(c >= 0.0 && c <= 1.0)) throw PreconditionError("center factor outside [0,1]");

  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) norms[i] = norm2(f.features[i]);
  const auto members = members_by_class(f);
  constexpr double kPairTol = 1e-12;
  for (const auto& cls : members)
    for (std::size_t a = 0; a < cls.size(); ++a)
      for (std::size_t b = a + 1; b < cls.size(); ++b) {
        const std::size_t i = cls[a], j = cls[b];
        const double dn = norms[i] - norms[j];
        if ((s.sample_factors[i] - s.sample_factors[j]) * dn > kPairTol) {
          throw PreconditionError("samples " + std::to_string(i) + " and " + std::to_string(j) +
                                  " break anti-monotone scaling");
        }
        if ((s.sample_factors[i] * norms[i] - s.sample_factors[j] * norms[j]) * dn < -kPairTol) {
          throw PreconditionError("samples " + std::to_string(i) + " and " + std::to_string(j) +
                                  " break order-preserving scaling");
        }
      }

  const auto original = intra_class_distance(f);
  const std::size_t d = f.dim();
  Lemma1Report report;
  report.per_sample_margin = INFINITY;
  report.trace_margin = INFINITY;
  report.empirical_mean_trace_margin = INFINITY;
  for (std::size_t k = 0; k < members.size(); ++k) {
    const auto& cs = original.classes[k];
    const double ck = s.center_factors[k];
    Vector scaled_center(d);
    for (std::size_t a = 0; a < d; ++a) scaled_center[a] = ck * cs.center[a];

    double scaled_trace = 0.0;
    Vector scaled_mean(d, 0.0);
    for (std::size_t i : members[k]) {
      const double ci = s.sample_factors[i];
      double dev_sq = 0.0;
      double orig_sq = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double t = ci * f.features[i][a] - scaled_center[a];
        dev_sq += t * t;
        const double o = f.features[i][a] - cs.center[a];
        orig_sq += o * o;
        scaled_mean[a] += ci * f.features[i][a];
      }
      scaled_trace += dev_sq;
      const double margin = ck * std::sqrt(orig_sq) - std::sqrt(dev_sq);
      if (margin < report.per_sample_margin) {
        report.per_sample_margin = margin;
        report.worst_sample = i;
      }
    }
    const double n = static_cast<double>(members[k].size());
    scaled_trace /= n;
    report.trace_margin = std::min(report.trace_margin, ck * ck * cs.trace - scaled_trace);

    for (double& v : scaled_mean) v /= n;
    double emp_trace = 0.0;
    for (std::size_t i : members[k])
      for (std::size_t a = 0; a < d; ++a) {
        const double t = s.sample_factors[i] * f.features[i][a] - scaled_mean[a];
        emp_trace += t * t;
      }
    report.empirical_mean_trace_margin =
        std::min(report.empirical_mean_trace_margin, ck * ck * cs.trace - emp_trace / n);
  }
  report.per_sample_holds = report.per_sample_margin >= -slack;
  report.trace_holds = report.trace_margin >= -slack;
  return report;
}

double prop1_factor(double z, double p) {
  // 1 / (1 + e^{zp} / (1 + e^z)), with log(1 + e^z) as a stable softplus.
  const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  return 1.0 / (1.0 + std::exp(z * p - softplus));
}

double prop1_norm_ratio(double z, double p) {
  const Tensor u = Tensor::column({0.0, z});
  const Tensor prompt = Tensor::matrix(1, 1, z * p);
  const Tensor plain = dense::softmax_columns(u);
  const Tensor prompted = prompted_softmax(u, prompt, EmbeddingWay::PureCat);
  return std::hypot(prompted[0], prompted[1]) / std::hypot(plain[0], plain[1]);
}

Prop1Report check_prop1(double z1, double z2, double p) {
  Prop1Report r;
  r.c1 = prop1_factor(z1, p);
  r.c2 = prop1_factor(z2, p);
  r.holds = z2 >= z1 ? r.c1 >= r.c2 : r.c2 >= r.c1;
  r.ratio_discrepancy =
      std::max(std::abs(r.c1 - prop1_norm_ratio(z1, p)), std::abs(r.c2 - prop1_norm_ratio(z2, p)));
  return r;
}

Vector measure_scaling_factors(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way) {
  if (way != EmbeddingWay::PureCat && way != EmbeddingWay::MultiCat) {
    throw ContractError("scaling factors are defined for concatenating embedding ways only");
  }
  if (prompt.cols() != ktq.cols()) throw ContractError("prompt and score matrix column counts differ");
  const std::size_t n = ktq.rows(), c = ktq.cols(), dp = prompt.rows();
  const Tensor alpha = way == EmbeddingWay::MultiCat ? scaling_vector_alpha(ktq) : Tensor(Shape{1, c}, 1.0);
  Vector out(c);
  std::vector<double> u(n), all(n + dp);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < dp; ++i) all[i] = prompt(i, j) * alpha[j];
    for (std::size_t i = 0; i < n; ++i) all[dp + i] = u[i] = ktq(i, j);
    out[j] = std::exp(log_sum_exp(u) - log_sum_exp(all));
  }
  return out;
}

PcaResult pca_project(const std::vector<Vector>& samples, int k, std::uint64_t seed, double tol) {
  if (k < 1) throw AnalysisError("PCA needs k >= 1");
  if (samples.size() < static_cast<std::size_t>(k) + 1) {
    throw AnalysisError("PCA with k = " + std::to_string(k) + " needs at least " + std::to_string(k + 1) +
                        " samples");
  }
  const std::size_t d = samples.front().size();
  if (static_cast<std::size_t>(k) > d) throw AnalysisError("PCA k exceeds the feature dimension");
  const std::size_t m = samples.size();

  PcaResult r;
  r.mean.assign(d, 0.0);
  for (const auto& x : samples) {
    if (x.size() != d) throw AnalysisError("PCA samples have different dimensions");
    for (std::size_t a = 0; a < d; ++a) r.mean[a] += x[a];
  }
  for (double& v : r.mean) v /= static_cast<double>(m);

  Tensor cov = Tensor::matrix(d, d);
  for (const auto& x : samples)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += (x[a] - r.mean[a]) * (x[b] - r.mean[b]);
  for (auto& v : cov.data()) v /= static_cast<double>(m - 1);
  double total_variance = 0.0;
  for (std::size_t a = 0; a < d; ++a) total_variance += cov(a, a);

  Rng rng = Rng::stream(seed, "pca");
  constexpr int kMaxIterations = 200000;
  for (int comp = 0; comp < k; ++comp) {
    Vector v(d);
    for (double& x : v) x = rng.normal();
    double nv = norm2(v);
    for (double& x : v) x /= nv;
    double lambda = 0.0;
    Vector w(d);
    for (int it = 0; it < kMaxIterations; ++it) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov(a, b) * v[b];
        w[a] = s;
      }
      const double nw = norm2(w);
      if (nw <= 1e-300) {
        lambda = 0.0;
        break;
      }
      double delta = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double next = w[a] / nw;
        delta = std::max(delta, std::abs(next - v[a]));
        v[a] = next;
      }
      lambda = nw;
      if (delta < tol) break;
    }
    if (lambda <= 1e-14 * std::max(1.0, total_variance)) {
      std::fill(v.begin(), v.end(), 0.0);
      lambda = 0.0;
    } else {
      // Rayleigh quotient is the better eigenvalue estimate.
      double rq = 0.0;
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) rq += v[a] * cov(a, b) * v[b];
      lambda = rq;
      std::size_t big = 0;
      for (std::size_t a = 1; a < d; ++a)
        if (std::abs(v[a]) > std::abs(v[big])) big = a;
      if (v[big] < 0)
        for (double& x : v) x = -x;
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) cov(a, b) -= lambda * v[a] * v[b];
    }
    r.components.push_back(v);
    r.eigenvalues.push_back(lambda);
    r.explained_ratio.push_back(total_variance > 0 ? lambda / total_variance : 0.0);
  }

  for (const auto& x : samples) {
    Vector p(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < k; ++c)
      for (std::size_t a = 0; a < d; ++a) p[static_cast<std::size_t>(c)] += (x[a] - r.mean[a]) * r.components[c][a];
    r.projections.push_back(std::move(p));
  }
  return r;
}

std::vector<HistogramBin> feature_histogram(const Vector& values, int bins) {
  if (values.empty()) throw AnalysisError("histogram of an empty sample");
  if (bins < 1) throw AnalysisError("histogram needs at least one bin");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return {{lo, hi, values.size()}};
  const double width = (hi - lo) / bins;
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].left = lo + width * b;
    out[static_cast<std::size_t>(b)].right = b + 1 == bins ? hi : lo + width * (b + 1);
  }
  for (double v : values) {
    auto b = static_cast<std::size_t>(std::floor((v - lo) / width));
    b = std::min(b, static_cast<std::size_t>(bins - 1));
    // Keep the index consistent with the stored edges under rounding.
    while (b > 0 && v < out[b].left) --b;
    while (b + 1 < out.size() && v >= out[b + 1].left) ++b;
    ++out[b].count;
  }
  return out;
}

std::string histogram_csv(const std::vector<HistogramBin>& bins) {
  std::ostringstream os;
  os << "bin_left,bin_right,count\n";
  for (const auto& b : bins) os << format_double(b.left) << ',' << format_double(b.right) << ',' << b.count << '\n';
  return os.str();
}

std::string projection_csv(const PcaResult& pca, const std::vector<int>& labels) {
  std::ostringstream os;
  const std::size_t k = pca.components.size();
  os << "sample_id,label";
  for (std::size_t c = 0; c < k; ++c) os << ",pc" << c + 1;
  os << '\n';
  for (std::size_t i = 0; i < pca.projections.size(); ++i) {
    os << i << ',' << (i < labels.size() ? labels[i] : -1);
    for (double v : pca.projections[i]) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace eptlab

#include "eptlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "eptlab/errors.hpp"

namespace eptlab {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw DimensionError("tensor of shape " + eptlab::shape_string(shape_) + " given " +
                         std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) { return Tensor({rows, cols}, fill); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, std::vector<double>{value}); }

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() < 2) return 1;
  std::size_t c = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
  return c;
}

double Tensor::item() const {
  if (values_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string());
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const { return eptlab::shape_string(shape_); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff between " + a.shape_string() + " and " + b.shape_string());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

namespace dense {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

Tensor softmax_columns(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t j = 0; j < c; ++j) {
    double hi = -INFINITY;
    for (std::size_t i = 0; i < r; ++i) hi = std::max(hi, m(i, j));
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double e = std::exp(m(i, j) - hi);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t i = 0; i < r; ++i) out(i, j) /= total;
  }
  return out;
}

}  // namespace dense

}  // namespace eptlab

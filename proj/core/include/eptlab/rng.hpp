#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace eptlab {

/// Deterministic random source. Distributions are implemented here rather than
/// through <random> distribution objects, whose output is not specified by the
/// standard, so streams are bit-stable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream keyed by (seed, purpose). Adding a new purpose never
  /// perturbs existing streams.
  static Rng stream(std::uint64_t seed, std::string_view purpose);

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t stream_seed(std::uint64_t seed, std::string_view purpose);

}  // namespace eptlab

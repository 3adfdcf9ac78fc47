#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace oodcv {

/// Derives an independent 64-bit seed for a named sub-stream of `root`.
/// Used so that every component (benchmark, pretrain, ttt-A, ...) draws from
/// its own stream and can be re-run in isolation.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

/// Thin wrapper over mt19937_64. Everything random in the toolkit goes
/// through one of these, passed explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive.
  int randint(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal(double mean = 0.0, double stddev = 1.0);
  double gamma(double shape);
  double beta(double a, double b);
  std::vector<std::size_t> permutation(std::size_t n);
  /// Fresh child generator; advances this one.
  Rng split() { return Rng(next_u64()); }

  std::string serialize() const;
  void deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace oodcv

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>

namespace sm3 {

/// Deterministic random stream built on std::mt19937_64, whose output
/// sequence is fixed by the C++ standard. Uniform and normal variates are
/// derived here rather than through <random> distributions, which are
/// implementation-defined, so a seed yields the same stream on every
/// toolchain.
///
///   uniform()  : top 53 bits of one engine draw, scaled to [0, 1)
///   normal()   : Box-Muller, one engine pair per variate (cosine branch)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  /// Fisher-Yates, back to front.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Child seed for a named purpose, e.g. derive_seed(run_seed, "augment",
/// {sample, view, epoch}). The tag is hashed with FNV-1a and folded together
/// with every part through mix64.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::initializer_list<std::uint64_t> parts = {});

}  // namespace sm3

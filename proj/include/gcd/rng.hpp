#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace gcd {

// splitmix64 finaliser; used to derive independent per-purpose seeds so that
// turning one component off never shifts the random stream of another.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

// Stream tags for derive_seed.
enum class Stream : std::uint64_t {
  kGlyph = 1,
  kDomain = 2,
  kAugment = 3,
  kInit = 4,
  kBatch = 5,
  kMixPlan = 6,
  kDerangement = 7,
  kProbe = 8,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  double beta(double a, double b);
  std::vector<int> permutation(int n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace gcd

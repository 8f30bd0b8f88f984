#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mitodet {

// Raised when inputs violate a documented precondition or schema.
// The CLI maps this to exit code 1, everything else to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic, stdlib-independent generator (xoshiro256++ seeded via
// splitmix64). Every stochastic component in the pipeline draws from this
// so results are reproducible across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  // Independent child stream, e.g. one per patch index or per image.
  static Rng split(uint64_t seed, uint64_t stream);

  uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal (Box-Muller).
  double normal();
  double normal(double mean, double stddev);

  std::string state_string() const;

 private:
  uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace mitodet

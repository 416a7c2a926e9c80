#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace xtask {

/// Error taxonomy shared by the library and the CLI. Each category maps to a
/// stable process exit code so callers can script against failures.
enum class ErrorCategory {
  config = 2,      // invalid or inconsistent configuration
  io = 3,          // filesystem / serialization failures
  data = 4,        // malformed or degenerate data (empty masks, bad payloads)
  shape = 5,       // tensor shape or resolution violations
  divergence = 6,  // NaN/inf encountered during optimization
  verify = 7,      // a verification sweep found a violation
};

inline const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::data: return "data";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::divergence: return "divergence";
    case ErrorCategory::verify: return "verify";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const { return category_; }
  const char* category_name() const { return to_string(category_); }
  int exit_code() const { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& msg) {
  throw Error(c, msg);
}

inline void check(bool cond, ErrorCategory c, const std::string& msg) {
  if (!cond) fail(c, msg);
}

/// Deterministic random stream. Distributions are hand-rolled on top of
/// mt19937_64 so sampled sequences do not depend on the standard library's
/// distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Independent substream derived from this stream's seed material.
  Rng fork(uint64_t salt) {
    uint64_t s = gen_();
    return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

template <typename T>
void fisher_yates_shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace xtask

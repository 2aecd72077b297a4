#ifndef MIBCI_COMMON_HPP
#define MIBCI_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace mibci {

// ----------------------------- error taxonomy -----------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/geometry violations in tensor ops and model/data plumbing.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An architecture cannot be built from the given ModelSpec.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Invalid TrainConfig / SynthConfig / RunConfig field values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse (non-scalar loss, label out of range, repeated backward).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated data files; message carries file and offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Evaluation-protocol violations (bad fold sets, misaligned vectors).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Statistical test preconditions (n too small, zero variance, ...).
class StatError : public Error {
 public:
  using Error::Error;
};

// CLI usage errors; mapped to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during fit; a fold that throws this is
// recorded as failed and the campaign continues.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

// ----------------------------- numeric mode -----------------------------

enum class Precision : uint8_t { single32 = 0, double64 = 1 };

inline std::string_view precision_name(Precision p) {
  return p == Precision::single32 ? "single" : "double";
}

// ----------------------------- deterministic RNG -----------------------------

// mt19937_64 with hand-rolled distributions. The standard fully specifies the
// engine sequence but not the distributions, so uniform/normal/shuffle are
// implemented here to make runs bit-reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1) with 53 random bits
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.141592653589793 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // unbiased integer in [0, n) by rejection
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = ~uint64_t{0} - ~uint64_t{0} % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
      const uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ----------------------------- hashing -----------------------------

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (const char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// stable per-task seed derivation (campaign seed x subject id, order free)
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
  uint64_t h = fnv1a64(tag);
  h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace mibci

#endif  // MIBCI_COMMON_HPP

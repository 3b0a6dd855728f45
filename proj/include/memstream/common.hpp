#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memstream {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension / shape mismatch between tensors.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
  using Error::Error;
};

/// Non-finite value produced where the contract requires finite output.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Malformed file contents (bad magic, version, checksum, syntax).
class FormatError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

namespace detail {
inline void msg_append(std::ostringstream&) {}

template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, T&& v, Rest&&... rest) {
  os << v;
  msg_append(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
std::string msg(Parts&&... parts) {
  std::ostringstream os;
  detail::msg_append(os, std::forward<Parts>(parts)...);
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic random source
//
// All randomness in the project flows through this wrapper. Only operations
// whose output sequence is pinned by the C++ standard are used (raw mt19937_64
// output), so identical seeds give identical streams on any conforming
// implementation; std::*_distribution is avoided for that reason.
// ---------------------------------------------------------------------------

class RandomSource {
public:
  explicit RandomSource(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (deterministic given the seed).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586477 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, std) truncated to +-2 std by rejection.
  double trunc_normal(double std_dev) {
    double v = 0.0;
    do {
      v = normal();
    } while (v < -2.0 || v > 2.0);
    return v * std_dev;
  }

  /// Uniform integer in [0, n) by rejection (unbiased).
  std::uint64_t randint(std::uint64_t n) {
    if (n == 0) throw ContractError("randint: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = 0;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[randint(i)]);
    }
  }

private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a master seed with a string tag into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (const char c : tag) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = master + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index) {
  return derive_seed(derive_seed(master, tag) + index * 0x9e3779b97f4a7c15ull,
                     tag);
}

}  // namespace memstream

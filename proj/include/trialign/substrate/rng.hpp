// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "trialign/error.hpp"

namespace trialign {

// Portable random stream. The engine (mt19937_64 seeded through seed_seq) is
// fully specified by the standard, and every draw below is computed from raw
// engine output, so sequences match across standard libraries.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x7452'6941u};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// k distinct values from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    require(k <= n, "Rng::sample_without_replacement: k exceeds n");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(first[i - 1], first[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << stream_ << ' ' << has_spare_ << ' ';
    os.precision(17);
    os << std::hexfloat << spare_ << std::defaultfloat << ' ' << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    std::istringstream is(text);
    std::uint64_t seed = 0, stream = 0;
    bool has_spare = false;
    std::string spare_text;
    is >> seed >> stream >> has_spare >> spare_text;
    Rng rng(seed, stream);
    rng.has_spare_ = has_spare;
    rng.spare_ = std::strtod(spare_text.c_str(), nullptr);
    is >> rng.engine_;
    if (!is) throw InvalidArgument("Rng::deserialize: malformed state");
    return rng;
  }

  bool operator==(const Rng& other) const {
    return seed_ == other.seed_ && stream_ == other.stream_ && has_spare_ == other.has_spare_ &&
           (!has_spare_ || spare_ == other.spare_) && engine_ == other.engine_;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives a stream id from a tuple of coordinates (epoch, step, sample, ...).
inline std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) {
  // splitmix64 finalizer over a running FNV-style fold
  std::uint64_t h = 0x9E37'79B9'7F4A'7C15ull;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9E37'79B9'7F4A'7C15ull + (h << 6) + (h >> 2);
    h ^= h >> 30;
    h *= 0xBF58'476D'1CE4'E5B9ull;
    h ^= h >> 27;
    h *= 0x94D0'49BB'1331'11EBull;
    h ^= h >> 31;
  }
  return h;
}

}  // namespace trialign

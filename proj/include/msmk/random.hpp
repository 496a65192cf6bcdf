// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace msmk {

/// Counter-based 64-bit generator (SplitMix64 finalizer over key + counter).
///
/// The full state is the pair (key, counter), so a stream can be saved and
/// resumed exactly, and independent sub-streams are obtained with split()
/// without advancing the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

  static Rng from_state(std::uint64_t key, std::uint64_t counter) {
    Rng r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  /// Deterministic child stream; does not touch this stream's counter.
  Rng split(std::uint64_t stream) const {
    return from_state(mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL)), 0);
  }

  std::uint64_t next_u64() { return mix(key_ + kGamma * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal with the given std, resampled until it falls within two std.
  double truncated_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * stddev;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace msmk

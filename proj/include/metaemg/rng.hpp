#pragma once

// Counter-based, splittable random streams.
//
// Every draw is a pure function of (key, counter), so a stream derived from
// (seed, subject, recording) yields the same values no matter which thread
// consumes it or in which order streams are created.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace metaemg {

namespace detail {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr Rng(std::uint64_t seed) noexcept : key_(detail::mix64(seed ^ detail::kGolden)) {}

  /// Independent child stream. Children of the same parent with different ids
  /// never share a key in practice; the parent's own position is irrelevant.
  constexpr Rng split(std::uint64_t stream_id) const noexcept {
    Rng child(0);
    child.key_ = detail::mix64(key_ ^ detail::mix64(stream_id + detail::kGolden));
    return child;
  }

  constexpr Rng split(std::string_view stream_name) const noexcept {
    return split(detail::fnv1a(stream_name));
  }

  constexpr std::uint64_t operator()() noexcept { return next_u64(); }
  static constexpr std::uint64_t min() noexcept { return 0; }
  static constexpr std::uint64_t max() noexcept { return ~std::uint64_t{0}; }

  constexpr std::uint64_t next_u64() noexcept {
    return detail::mix64(key_ + detail::kGolden * ++counter_);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  constexpr double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling removes modulo bias.
  constexpr std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  /// Standard normal via Box-Muller; no cached second variate so the stream
  /// position depends only on the number of calls.
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Seed of the named stream `name` under `seed`; every stochastic component
/// draws from such a stream so runs are reproducible from their manifests.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
  return Rng(seed).split(name).next_u64();
}

}  // namespace metaemg

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

#include "alphanet/error.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based stream keyed by (seed, label path). Draw k of a stream is
/// mix(key + (k+1) * golden), so forks never depend on how much a sibling or
/// parent has consumed.
class PrngStream {
 public:
  PrngStream() : PrngStream(0, "") {}
  PrngStream(std::uint64_t seed, std::string label)
      : seed_(seed), label_(std::move(label)), key_(derive_key(seed_, label_)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }
  std::uint64_t counter() const noexcept { return counter_; }

  PrngStream fork(std::string_view child) const {
    if (child.empty()) throw ConfigError("prng fork label must be non-empty");
    std::string path = label_.empty() ? std::string(child) : label_ + "/" + std::string(child);
    return PrngStream(seed_, std::move(path));
  }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    const auto u = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(u >> 64);
  }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  T uniform_as() noexcept {
    if constexpr (sizeof(T) == 4) {
      return static_cast<T>(next_u64() >> 40) * T(0x1.0p-24);
    } else {
      return static_cast<T>(uniform());
    }
  }

 private:
  static std::uint64_t derive_key(std::uint64_t seed, std::string_view label) noexcept {
    return detail::mix64(detail::mix64(seed) ^ detail::fnv1a(label));
  }

  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline PrngStream prng_fork(const PrngStream& parent, std::string_view label) {
  return parent.fork(label);
}

/// i.i.d. samples in [0, 1); advances the stream.
template <typename T = float>
Tensor<T> prng_uniform(PrngStream& stream, const Shape& shape) {
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = stream.template uniform_as<T>();
  return out;
}

template <typename T = float>
Tensor<T> prng_normal(PrngStream& stream, const Shape& shape, double stddev = 1.0) {
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(stddev * stream.normal());
  return out;
}

}  // namespace alphanet

#pragma once

#include <cstdint>
#include <random>

namespace rise {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Seeded random stream. Every stochastic step in the project draws from one
// of these so that a fixed seed reproduces runs exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(detail::splitmix64(seed)), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Inclusive bounds.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }

  std::uint64_t next_u64() { return gen_(); }

  // Independent child stream; two forks with different tags never collide.
  Rng fork(std::uint64_t tag) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(tag)));
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::uint64_t seed_;
};

}  // namespace rise

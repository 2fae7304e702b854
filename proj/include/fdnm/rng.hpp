#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fdnm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_purpose(std::string_view purpose) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based stream key: the same (seed, purpose, a, b) always yields the
/// same stream, regardless of what other streams were drawn before.
inline std::uint64_t stream_key(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0,
                                std::uint64_t b = 0) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ hash_purpose(purpose));
  k = splitmix64(k ^ a);
  return splitmix64(k ^ (b * 0xd1342543de82ef95ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t key) : engine_(key) {}
  Rng(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0)
      : engine_(stream_key(seed, purpose, a, b)) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fdnm

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fddcsi {

using Rng = std::mt19937_64;

/// Named substreams. Every random draw in the library is taken from a
/// generator derived from (master seed, stream, ids...) so that partial
/// reruns and parallel execution reproduce serial results bit for bit.
enum class Stream : std::uint64_t {
  Environment = 1,
  Users = 2,
  Pairs = 3,
  Noise = 4,
  Covariance = 5,
  NetInit = 6,
  Batch = 7,
  TaskSplit = 8,
  TaskRegen = 9,
  Probe = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                 std::initializer_list<std::uint64_t> ids = {}) {
  std::uint64_t h = splitmix64(master ^ 0x5a17c0deULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  for (auto id : ids) h = splitmix64(h ^ id);
  return h;
}

inline Rng make_rng(std::uint64_t master, Stream stream,
                    std::initializer_list<std::uint64_t> ids = {}) {
  return Rng(derive_seed(master, stream, ids));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace fddcsi

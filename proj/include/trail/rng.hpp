#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace trail {

// All randomness flows through named splitmix64 streams derived from one root
// seed, so every result is a pure function of (config, seed) regardless of
// thread count or evaluation order. std::random distributions are avoided on
// purpose: their output is implementation-defined and would break the
// bit-identical replay contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). Unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  // Standard normal, Box-Muller (no cached spare: one draw costs two
  // uniforms, which keeps the stream position a simple function of the
  // number of calls).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Derives a child stream seed from a root seed and a path of identifiers,
  // e.g. derive(root, {kStreamTrain, client, round}).
  static std::uint64_t derive(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix(root + 0x9e3779b97f4a7c15ull);
    for (std::uint64_t p : path) {
      s = mix(s ^ (p + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2)));
    }
    return s;
  }

 private:
  std::uint64_t state_;
};

// Stream identifiers used by the simulation engine.
enum StreamKind : std::uint64_t {
  kStreamTrain = 1,
  kStreamUplink = 2,
  kStreamDataset = 3,
  kStreamPartition = 4,
  kStreamScheduler = 5,
  kStreamDegradation = 6,
  kStreamModelInit = 7,
};

}  // namespace trail

#pragma once

#include <cstdint>

#include "gammtk/dist.hpp"

namespace gammtk {

// splitmix64; all randomness in the library flows through this generator so
// that results are bit-reproducible across platforms and worker counts.
struct SplitMix64 {
  std::uint64_t state;
  explicit SplitMix64(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
};

// Derives an independent substream seed from (seed, stream index).  Used for
// per-replicate and per-draw streams, which makes parallel execution
// independent of how work is partitioned.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 s(seed ^ (0x9E3779B97F4A7C15ULL * (stream + 0x632BE59BD9B4E019ULL)));
  s.next();
  return s.next();
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_.next(); }

  // uniform on (0, 1), never exactly 0 or 1
  double uniform01() { return (static_cast<double>(gen_.next() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) { return gen_.next() % n; }

  // standard normal via the inverse CDF, keeping draws identical regardless
  // of platform or standard library
  double normal() { return normal_quantile(uniform01()); }

  double normal(double mean, double sd) { return mean + sd * normal(); }

 private:
  SplitMix64 gen_;
};

}  // namespace gammtk

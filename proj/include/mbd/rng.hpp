#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mbd {

// Seeded random stream with explicitly implemented transforms.
//
// The engine (mt19937_64) is fully specified by the standard; the
// distribution transforms below are hand-rolled because the std::
// distributions are implementation-defined. This keeps every sample
// bit-reproducible across compilers and standard libraries.
class RandomStream {
public:
  explicit RandomStream(std::uint64_t seed) : engine_(mix(seed)) {}

  // Derive an independent sub-stream, e.g. one per slice or per repetition.
  // Serial and parallel consumers draw identical sequences.
  static RandomStream substream(std::uint64_t seed, std::uint64_t index) {
    return RandomStream(mix(seed) ^ mix(index * 0x9e3779b97f4a7c15ULL + 1));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo,hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo,hi] via rejection-free Lemire-style mapping.
  // Bias is below 2^-64 for the small ranges used here.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(
                    static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * span) >> 64));
  }

  // Standard normal via Box-Muller; pairs are consumed eagerly so the
  // stream advances by exactly two engine draws per pair.
  void normal_pair(double& z0, double& z1) {
    const double u1 = 1.0 - uniform(); // (0,1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    z0 = r * std::cos(2.0 * M_PI * u2);
    z1 = r * std::sin(2.0 * M_PI * u2);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double z0, z1;
    normal_pair(z0, z1);
    spare_ = z1;
    have_spare_ = true;
    return z0;
  }

private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

} // namespace mbd

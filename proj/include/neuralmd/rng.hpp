#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace neuralmd {

/// Derive an independent seed for a named consumer (sampler, init, perturbation, ...) from the
/// root seed, so adding a consumer never shifts the draws of the others.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  auto mix = [](std::uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(root ^ mix(h)) ^ mix(index + 0x632be59bd9b4e019ull));
}

/// mt19937_64 with a platform-independent uniform mapping.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  Rng(std::uint64_t root, std::string_view name, std::uint64_t index = 0) : eng_(substream_seed(root, name, index)) {}

  std::uint64_t next() { return eng_(); }
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace neuralmd

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace throttle {

// Mixes a global seed with a named substream ("data", "gates", "init",
// "controller", ...) so that every consumer of randomness gets an
// independent, reproducible stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                          std::uint64_t index = 0);

// Seeded generator with the handful of distributions the library needs.
// All samplers are written out explicitly so results do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [0, n).
  std::size_t index(std::size_t n);
  double normal();
  double logistic();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace throttle

#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace xfrn {

// Seeded generator with portable draws. std:: distributions are
// implementation-defined, so bounded integers and normals are derived here
// directly from mt19937_64 output to keep artifacts identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  // Uniform in [0, 1).
  double uniform();
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

  // Child generator for an independent stream (e.g. one per layer).
  Rng fork(std::uint64_t salt);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xfrn

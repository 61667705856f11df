#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fermi {

// Deterministic seeded random stream (splitmix64 core, Box-Muller normals).
//
// Substreams are derived from the *construction* seed by hashing string and
// integer tags, so any worker can rebuild exactly the same stream without
// coordination. This is what makes results independent of worker count.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64();

  // Uniform double in [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal draw.
  double gaussian();

  // Uniform index in [0, n). n must be > 0.
  std::size_t uniform_index(std::size_t n);

  // Child stream keyed by (construction seed, tag, a, b). Independent of how
  // much of this stream has been consumed.
  RngStream derive(std::string_view tag, std::uint64_t a = 0,
                   std::uint64_t b = 0) const;

  std::uint64_t seed() const { return seed_; }

  // Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a 64-bit hash; used for stream derivation and config hashing.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace fermi

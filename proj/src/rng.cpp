#include "fermi/rng.hpp"

#include <cmath>

#include "fermi/errors.hpp"

namespace fermi {

namespace {

inline std::uint64_t splitmix(std::uint64_t& s) {
  s += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t RngStream::next_u64() { return splitmix(state_); }

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RngStream::gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 shifted into (0,1] so log() is finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

std::size_t RngStream::uniform_index(std::size_t n) {
  if (n == 0) throw ValidationError("uniform_index: n must be > 0");
  return static_cast<std::size_t>(next_u64() % n);
}

RngStream RngStream::derive(std::string_view tag, std::uint64_t a,
                            std::uint64_t b) const {
  std::uint64_t h = fnv1a64(tag);
  char buf[24];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((seed_ >> (8 * i)) & 0xFF);
  for (int i = 0; i < 8; ++i) buf[8 + i] = static_cast<char>((a >> (8 * i)) & 0xFF);
  for (int i = 0; i < 8; ++i) buf[16 + i] = static_cast<char>((b >> (8 * i)) & 0xFF);
  h = fnv1a64(std::string_view(buf, sizeof(buf)), h);
  // One scramble round so nearby tags do not give nearby seeds.
  std::uint64_t s = h;
  return RngStream(splitmix(s));
}

}  // namespace fermi

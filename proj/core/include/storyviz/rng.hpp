#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "storyviz/common.hpp"

namespace storyviz {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible across platforms and standard library versions; serialization
// captures the full state, including the cached Box-Muller spare.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  int64_t uniform_int(int64_t n) {
    SV_CHECK(n > 0, "uniform_int needs positive n, got ", n);
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return static_cast<int64_t>(draw % un);
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]; keeps log() finite
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * pi() * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Derives an independent stream seed from base seed material and a stream
  // tag. Used to give every story / evaluation record its own
  // order-independent substream.
  static uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    uint64_t x = seed;
    uint64_t mixed = splitmix64(x);
    mixed ^= 0x9e3779b97f4a7c15ull * (tag + 1);
    return mixed;
  }

  static Rng derive(uint64_t seed, uint64_t tag) { return Rng(derive_seed(seed, tag)); }

  void serialize(std::ostream& os) const {
    for (uint64_t word : state_) write_u64(os, word);
    write_u64(os, has_spare_ ? 1 : 0);
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(spare_));
    std::memcpy(&bits, &spare_, sizeof(bits));
    write_u64(os, bits);
  }

  void deserialize(std::istream& is) {
    for (auto& word : state_) word = read_u64(is);
    has_spare_ = read_u64(is) != 0;
    const uint64_t bits = read_u64(is);
    std::memcpy(&spare_, &bits, sizeof(spare_));
  }

  bool operator==(const Rng& other) const {
    return state_ == other.state_ && has_spare_ == other.has_spare_ &&
           (!has_spare_ || spare_ == other.spare_);
  }

 private:
  static constexpr double pi() { return 3.14159265358979323846; }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static void write_u64(std::ostream& os, uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }

  static uint64_t read_u64(std::istream& is) {
    unsigned char bytes[8];
    is.read(reinterpret_cast<char*>(bytes), 8);
    SV_CHECK(is.good(), "rng deserialize: stream truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[i]) << (8 * i);
    return v;
  }

  std::array<uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace storyviz

#include "crossdiff/rng.hpp"

#include <cmath>

namespace crossdiff {

uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {
inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64_next(sm);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  const uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_double_open() { return 1.0 - next_double(); }

double Rng::next_gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = next_double_open();
  const double u2 = next_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

uint64_t derive_seed(uint64_t master, SeedDomain domain, uint64_t index) {
  return derive_seed(master, static_cast<uint64_t>(domain), index);
}

uint64_t derive_seed(uint64_t master, uint64_t domain, uint64_t index) {
  uint64_t s = master;
  uint64_t h = splitmix64_next(s);
  s = h ^ (domain * 0xD6E8FEB86659FD93ULL);
  h = splitmix64_next(s);
  s = h ^ (index * 0xA3B195354A39B70DULL);
  return splitmix64_next(s);
}

uint64_t StreamKey::row_seed(uint64_t row) const {
  uint64_t s = stream;
  uint64_t h = splitmix64_next(s);
  s = h ^ (counter * 0x9E6C63D0876A9F4BULL);
  h = splitmix64_next(s);
  s = h ^ (row * 0xCB9E59D96AB86F4DULL);
  return splitmix64_next(s);
}

}  // namespace crossdiff

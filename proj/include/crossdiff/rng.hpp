#pragma once

#include <cstdint>

namespace crossdiff {

// All randomness in the project flows through this generator so that runs are
// reproducible bit-for-bit from a single master seed. The engine is
// xoshiro256++ seeded through splitmix64; both algorithms are fixed by this
// header and do not depend on the platform's std library.
class Rng {
public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1), 53-bit mantissa.
  double next_double();

  // Uniform in (0, 1], safe as a log() argument.
  double next_double_open();

  // Standard normal via Box-Muller. Consumes two uniforms every other call;
  // the spare is cached, so the draw sequence is a pure function of the seed.
  double next_gaussian();

private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

uint64_t splitmix64_next(uint64_t& state);

// Substream derivation. A master seed fans out to independent streams keyed
// by (domain, index); the mapping is pure mixing, so any component can be
// re-derived in isolation (e.g. the heldout stream without the data stream).
enum class SeedDomain : uint64_t {
  ConceptVectors = 1,
  Partition = 2,
  Probabilities = 3,
  Transform = 4,
  DataStream = 5,
  Heldout = 6,
  ModelInit = 7,
  Stitch = 8,
  Misc = 9,
};

uint64_t derive_seed(uint64_t master, SeedDomain domain, uint64_t index = 0);
uint64_t derive_seed(uint64_t master, uint64_t domain, uint64_t index = 0);

// Stream key for batch generation: (stream seed, batch counter). Each batch
// derives per-row seeds from (stream, counter, row), which makes generation
// order-free across rows and restartable at any batch index.
struct StreamKey {
  uint64_t stream = 0;
  uint64_t counter = 0;

  uint64_t row_seed(uint64_t row) const;
};

}  // namespace crossdiff

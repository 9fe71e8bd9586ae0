#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "jem/tensor.hpp"

namespace jem {

// SplitMix64 finalizer; the basis for deriving independent stream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

// Deterministic child seed from a parent seed, a purpose tag and an index.
// All randomness in a command fans out from one user seed through this.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag, std::uint64_t index = 0) noexcept;

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform on [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Standard normal via Box-Muller; no cached spare, so the stream depends
    // only on the number of draws.
    double normal();
    std::uint64_t next_u64() { return engine_(); }
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    Tensor uniform_tensor(const Shape& shape);
    Tensor normal_tensor(const Shape& shape, double stddev = 1.0);

private:
    std::mt19937_64 engine_;
};

}  // namespace jem

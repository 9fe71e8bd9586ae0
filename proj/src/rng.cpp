#include "jem/rng.hpp"

#include <cmath>
#include <numbers>

namespace jem {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag, std::uint64_t index) noexcept {
    // FNV-1a over the tag, then mixed with parent and index.
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return mix64(mix64(parent ^ h) + index);
}

double Rng::uniform() {
    // 53 random bits -> [0, 1).
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

Tensor Rng::uniform_tensor(const Shape& shape) {
    Tensor t(shape);
    for (double& v : t.values()) {
        v = uniform();
    }
    return t;
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
    Tensor t(shape);
    for (double& v : t.values()) {
        v = stddev * normal();
    }
    return t;
}

}  // namespace jem

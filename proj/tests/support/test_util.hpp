#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "jem/dataset.hpp"
#include "jem/encoders.hpp"
#include "jem/rng.hpp"

namespace jem::testing {

// Central difference of f along coordinate i of x.
inline double central_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, std::size_t i,
                                 double h = 1e-3) {
    Tensor plus = x;
    Tensor minus = x;
    plus[i] += h;
    minus[i] -= h;
    return (f(plus) - f(minus)) / (2.0 * h);
}

// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero pairs from
// dominating.
inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline TowerConfig small_tower_config(std::uint64_t seed = 3) {
    TowerConfig c;
    c.seed = seed;
    c.vocabulary = DatasetSpec::shapes_default().vocabulary();
    return c;
}

inline TowerPair small_towers(std::uint64_t seed = 3) { return make_toy_towers(small_tower_config(seed)); }

inline ImageTensor random_images(std::size_t batch, std::uint64_t seed, std::size_t res = 32) {
    Rng rng(seed);
    return ImageTensor(rng.uniform_tensor({batch, 3, res, res}));
}

// Captions cycling through the default classes.
inline std::vector<std::string> cycle_captions(std::size_t n, std::size_t offset = 0) {
    const DatasetSpec spec = DatasetSpec::shapes_default();
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = (i + offset) % spec.classes();
        out.push_back(spec.caption(cls / spec.shapes.size(), cls % spec.shapes.size()));
    }
    return out;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("jem_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace jem::testing

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jem/encoders.hpp"

namespace jem {

struct NamedColor {
    std::string name;
    std::array<double, 3> rgb;
};

// Attribute vocabularies and render settings for the captioned shapes set.
struct DatasetSpec {
    std::vector<NamedColor> colors;
    std::vector<std::string> shapes;
    std::size_t count = 320;
    std::size_t resolution = 32;
    std::uint64_t seed = 0;

    // 8 colors x 4 shapes, 32x32.
    static DatasetSpec shapes_default();

    std::size_t classes() const { return colors.size() * shapes.size(); }
    // "a" + color names + shape names.
    std::vector<std::string> vocabulary() const;
    std::string caption(std::size_t color, std::size_t shape) const;
};

struct RenderParams {
    std::size_t color = 0;
    std::size_t shape = 0;
    double center_x = 16.0;
    double center_y = 16.0;
    double radius = 9.0;
    double background = 0.35;
};

// Draws one anti-aliased shape on a plain gray background, (1, 3, R, R).
Tensor render_shape(const DatasetSpec& spec, const RenderParams& params);
// Random placement/size/background for class (color, shape).
RenderParams sample_render_params(const DatasetSpec& spec, std::size_t color, std::size_t shape, std::uint64_t seed);

struct Record {
    std::string path;  // relative to the dataset root
    std::string caption;
};

struct Batch {
    ImageTensor images;
    std::vector<std::string> captions;
    std::vector<std::size_t> indices;
};

// Image-caption pairs decoded into memory. The manifest is one record per
// line: `relative/path.png<TAB>caption`.
class PairedDataset {
public:
    static PairedDataset load(const std::filesystem::path& root);

    const std::filesystem::path& root() const noexcept { return root_; }
    const std::vector<Record>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    std::size_t resolution() const { return images_.dim(2); }
    std::uint64_t shuffle_seed() const noexcept { return shuffle_seed_; }
    void set_shuffle_seed(std::uint64_t seed) { shuffle_seed_ = seed; }

    Batch batch(const std::vector<std::size_t>& indices) const;
    // Deterministic epoch-shuffled order: step s uses positions
    // [s * size, (s + 1) * size) of the concatenated per-epoch permutations.
    std::vector<std::size_t> batch_indices(std::size_t step, std::size_t batch_size) const;

    // Caption attribute lookup for the default vocabulary (-1 when absent).
    static std::pair<int, int> parse_caption(const DatasetSpec& spec, const std::string& caption);

private:
    std::filesystem::path root_;
    std::vector<Record> records_;
    Tensor images_;
    std::uint64_t shuffle_seed_ = 0;
};

// Renders `spec.count` images (classes cycled, placement seeded) into
// out_dir/images, writes out_dir/manifest.tsv and out_dir/dataset.json.
PairedDataset make_synthetic_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace jem

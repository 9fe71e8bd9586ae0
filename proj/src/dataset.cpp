#include "jem/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "jem/error.hpp"
#include "jem/image_io.hpp"
#include "jem/rng.hpp"

namespace jem {
namespace {

constexpr std::size_t kSupersample = 4;

bool inside(std::size_t shape, double dx, double dy, double r) {
    switch (shape) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1: {  // square
            const double h = 0.8 * r;
            return std::abs(dx) <= h && std::abs(dy) <= h;
        }
        case 2: {  // triangle, apex up
            const double top = -r;
            const double bottom = 0.75 * r;
            if (dy < top || dy > bottom) {
                return false;
            }
            const double half = 0.95 * r * (dy - top) / (bottom - top);
            return std::abs(dx) <= half;
        }
        case 3: {  // plus-shaped cross
            const double arm = 0.32 * r;
            return (std::abs(dx) <= r && std::abs(dy) <= arm) || (std::abs(dy) <= r && std::abs(dx) <= arm);
        }
        default:
            throw InputError("unknown shape index " + std::to_string(shape));
    }
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) {
        return {};
    }
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

DatasetSpec DatasetSpec::shapes_default() {
    DatasetSpec spec;
    spec.colors = {
        {"red", {0.90, 0.10, 0.10}},    {"green", {0.10, 0.75, 0.15}},  {"blue", {0.10, 0.20, 0.90}},
        {"yellow", {0.95, 0.90, 0.10}}, {"cyan", {0.10, 0.85, 0.90}},   {"magenta", {0.90, 0.10, 0.85}},
        {"orange", {0.95, 0.55, 0.05}}, {"purple", {0.45, 0.10, 0.60}},
    };
    spec.shapes = {"circle", "square", "triangle", "cross"};
    return spec;
}

std::vector<std::string> DatasetSpec::vocabulary() const {
    std::vector<std::string> words{"a"};
    for (const auto& c : colors) {
        words.push_back(c.name);
    }
    words.insert(words.end(), shapes.begin(), shapes.end());
    return words;
}

std::string DatasetSpec::caption(std::size_t color, std::size_t shape) const {
    return "a " + colors.at(color).name + " " + shapes.at(shape);
}

RenderParams sample_render_params(const DatasetSpec& spec, std::size_t color, std::size_t shape, std::uint64_t seed) {
    Rng rng(seed);
    const double mid = (static_cast<double>(spec.resolution) - 1.0) / 2.0;
    const double scale = static_cast<double>(spec.resolution) / 32.0;
    RenderParams p;
    p.color = color;
    p.shape = shape;
    p.center_x = mid + rng.uniform(-4.0, 4.0) * scale;
    p.center_y = mid + rng.uniform(-4.0, 4.0) * scale;
    p.radius = rng.uniform(7.0, 11.0) * scale;
    p.background = rng.uniform(0.2, 0.5);
    return p;
}

Tensor render_shape(const DatasetSpec& spec, const RenderParams& params) {
    const std::size_t r = spec.resolution;
    const auto& rgb = spec.colors.at(params.color).rgb;
    Tensor image({1, 3, r, r});
    const std::size_t plane = r * r;
    for (std::size_t y = 0; y < r; ++y) {
        for (std::size_t x = 0; x < r; ++x) {
            std::size_t hits = 0;
            for (std::size_t sy = 0; sy < kSupersample; ++sy) {
                for (std::size_t sx = 0; sx < kSupersample; ++sx) {
                    const double px = x + (sx + 0.5) / kSupersample - 0.5;
                    const double py = y + (sy + 0.5) / kSupersample - 0.5;
                    hits += inside(params.shape, px - params.center_x, py - params.center_y, params.radius) ? 1 : 0;
                }
            }
            const double cover = static_cast<double>(hits) / (kSupersample * kSupersample);
            for (std::size_t c = 0; c < 3; ++c) {
                image[c * plane + y * r + x] = cover * rgb[c] + (1.0 - cover) * params.background;
            }
        }
    }
    return image;
}

PairedDataset make_synthetic_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.colors.empty() || spec.shapes.empty() || spec.count == 0 || spec.resolution < 8) {
        throw ConfigError("dataset spec needs colors, shapes, count >= 1 and resolution >= 8");
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) {
        throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
    }
    std::ofstream manifest(out_dir / "manifest.tsv", std::ios::binary | std::ios::trunc);
    if (!manifest) {
        throw IoError("cannot write " + (out_dir / "manifest.tsv").string());
    }
    const std::size_t classes = spec.classes();
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t cls = i % classes;
        const std::size_t color = cls / spec.shapes.size();
        const std::size_t shape = cls % spec.shapes.size();
        const RenderParams params = sample_render_params(spec, color, shape, derive_seed(spec.seed, "render", i));
        char name[32];
        std::snprintf(name, sizeof(name), "images/%05zu.png", i);
        write_png(out_dir / name, ImageTensor(render_shape(spec, params)));
        manifest << name << '\t' << spec.caption(color, shape) << '\n';
    }
    manifest.close();
    if (!manifest) {
        throw IoError("failed writing manifest");
    }

    nlohmann::json meta;
    meta["count"] = spec.count;
    meta["resolution"] = spec.resolution;
    meta["seed"] = spec.seed;
    meta["shapes"] = spec.shapes;
    for (const auto& c : spec.colors) {
        meta["colors"].push_back({{"name", c.name}, {"rgb", c.rgb}});
    }
    meta["vocabulary"] = spec.vocabulary();
    std::ofstream(out_dir / "dataset.json") << meta.dump(2) << '\n';
    return PairedDataset::load(out_dir);
}

PairedDataset PairedDataset::load(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.tsv");
    if (!in) {
        throw IoError("cannot read " + (root / "manifest.tsv").string());
    }
    PairedDataset ds;
    ds.root_ = root;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw InputError("manifest line " + std::to_string(line_no) + " has no tab separator");
        }
        Record rec{trim(line.substr(0, tab)), trim(line.substr(tab + 1))};
        if (rec.path.empty() || rec.caption.empty()) {
            throw InputError("manifest line " + std::to_string(line_no) + " has an empty field");
        }
        ds.records_.push_back(std::move(rec));
    }
    if (ds.records_.empty()) {
        throw InputError("dataset " + root.string() + " is empty");
    }
    std::vector<std::filesystem::path> paths;
    paths.reserve(ds.records_.size());
    for (const auto& rec : ds.records_) {
        paths.push_back(root / rec.path);
    }
    ds.images_ = read_png_batch(paths).tensor();
    if (ds.images_.dim(2) != ds.images_.dim(3)) {
        throw InputError("dataset images must be square");
    }
    return ds;
}

Batch PairedDataset::batch(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) {
        throw InputError("empty batch");
    }
    Shape shape = images_.shape();
    shape[0] = indices.size();
    Tensor out(shape);
    std::vector<std::string> captions;
    captions.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t idx = indices[i];
        if (idx >= size()) {
            throw InputError("record index out of range");
        }
        const auto src = images_.row(idx);
        std::copy(src.begin(), src.end(), out.row(i).begin());
        captions.push_back(records_[idx].caption);
    }
    return Batch{ImageTensor(std::move(out)), std::move(captions), indices};
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(seed, "epoch", epoch));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(perm[i - 1], perm[rng.below(i)]);
    }
    return perm;
}

std::vector<std::size_t> PairedDataset::batch_indices(std::size_t step, std::size_t batch_size) const {
    const std::size_t n = size();
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm;
    for (std::size_t j = 0; j < batch_size; ++j) {
        const std::size_t pos = step * batch_size + j;
        const std::size_t epoch = pos / n;
        if (epoch != cached_epoch) {
            perm = epoch_permutation(n, shuffle_seed_, epoch);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % n]);
    }
    return out;
}

std::pair<int, int> PairedDataset::parse_caption(const DatasetSpec& spec, const std::string& caption) {
    std::istringstream words(caption);
    std::string w;
    int color = -1;
    int shape = -1;
    while (words >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) { return std::tolower(ch); });
        for (std::size_t i = 0; i < spec.colors.size(); ++i) {
            if (spec.colors[i].name == w) {
                color = static_cast<int>(i);
            }
        }
        for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
            if (spec.shapes[i] == w) {
                shape = static_cast<int>(i);
            }
        }
    }
    return {color, shape};
}

}  // namespace jem

#include "oracle_classifier.hpp"

#include <algorithm>
#include <cmath>

#include "jem/container.hpp"
#include "jem/error.hpp"
#include "jem/optim.hpp"
#include "jem/rng.hpp"

namespace jem::testing {
namespace {

// Softmax cross-entropy over logits[offset, offset + n); writes its gradient.
double head_loss(std::span<const double> logits, std::size_t offset, std::size_t n, int label,
                 std::span<double> grad, double scale) {
    double mx = -1e300;
    for (std::size_t i = 0; i < n; ++i) {
        mx = std::max(mx, logits[offset + i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        z += std::exp(logits[offset + i] - mx);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::exp(logits[offset + i] - mx) / z;
        grad[offset + i] = scale * (p - (static_cast<int>(i) == label ? 1.0 : 0.0));
    }
    return -(logits[offset + static_cast<std::size_t>(label)] - mx - std::log(z));
}

std::size_t argmax(std::span<const double> v, std::size_t offset, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (v[offset + i] > v[offset + best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace

ShapeClassifier::ShapeClassifier(std::size_t colors, std::size_t shapes, std::size_t resolution, std::uint64_t seed)
    : colors_(colors), shapes_(shapes), resolution_(resolution) {
    Rng rng(derive_seed(seed, "oracle-classifier"));
    net_.push(nn::Conv2d::make(3, 16, 3, 2, 1, rng));
    net_.push(nn::SiLU{});
    net_.push(nn::Conv2d::make(16, 32, 3, 2, 1, rng));
    net_.push(nn::SiLU{});
    net_.push(nn::Conv2d::make(32, 32, 3, 1, 1, rng));
    net_.push(nn::SiLU{});
    const std::size_t extent = (resolution + 3) / 4;
    net_.push(nn::Linear::make(32 * extent * extent, colors + shapes, rng));
}

std::vector<std::pair<int, int>> ShapeClassifier::predict(const Tensor& images) const {
    const Tensor logits = net_.forward(images);
    std::vector<std::pair<int, int>> out;
    for (std::size_t n = 0; n < logits.dim(0); ++n) {
        const auto row = logits.row(n);
        out.emplace_back(static_cast<int>(argmax(row, 0, colors_)), static_cast<int>(argmax(row, colors_, shapes_)));
    }
    return out;
}

double ShapeClassifier::loss_and_grads(const Tensor& images, const std::vector<std::pair<int, int>>& labels,
                                       nn::ParamGrads* grads) const {
    nn::Tape tape;
    const Tensor logits = net_.forward(images, &tape);
    Tensor g(logits.shape());
    const double inv = 1.0 / static_cast<double>(labels.size());
    double loss = 0.0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        loss += inv * head_loss(logits.row(n), 0, colors_, labels[n].first, g.row(n), inv);
        loss += inv * head_loss(logits.row(n), colors_, shapes_, labels[n].second, g.row(n), inv);
    }
    if (grads != nullptr) {
        net_.backward(tape, g, grads);
    }
    return loss;
}

void ShapeClassifier::save(const std::filesystem::path& path) const {
    nlohmann::json header{{"kind", "oracle_classifier"},
                          {"version", 1},
                          {"colors", colors_},
                          {"shapes", shapes_},
                          {"resolution", resolution_}};
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    const auto names = net_.parameter_names();
    const auto params = net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        tensors.emplace_back(names[i], params[i]);
    }
    container::write(path, header, tensors);
}

ShapeClassifier ShapeClassifier::load(const std::filesystem::path& path) {
    const auto contents = container::read(path, "oracle_classifier", 1);
    ShapeClassifier clf(contents.header.at("colors"), contents.header.at("shapes"), contents.header.at("resolution"), 0);
    const auto names = clf.net_.parameter_names();
    auto params = clf.net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        *params[i] = contents.get(names[i]);
    }
    return clf;
}

std::vector<std::pair<int, int>> caption_labels(const DatasetSpec& spec, const std::vector<std::string>& captions) {
    std::vector<std::pair<int, int>> out;
    for (const auto& c : captions) {
        const auto label = PairedDataset::parse_caption(spec, c);
        if (label.first < 0 || label.second < 0) {
            throw InputError("caption without a known color and shape: " + c);
        }
        out.push_back(label);
    }
    return out;
}

ShapeClassifier train_shape_classifier(const DatasetSpec& spec, const ClassifierTrainConfig& config) {
    ShapeClassifier clf(spec.colors.size(), spec.shapes.size(), spec.resolution, config.seed);
    AdamW opt(std::as_const(clf.net()).parameters(), {0.9, 0.999, 1e-8, 0.0});
    const WarmupCosine schedule(config.lr, 50, config.steps);
    const std::size_t r = spec.resolution;
    for (std::size_t step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(config.seed, "oracle-step", step));
        Tensor x({config.batch, 3, r, r});
        std::vector<std::pair<int, int>> labels;
        for (std::size_t n = 0; n < config.batch; ++n) {
            const std::size_t color = rng.below(spec.colors.size());
            const std::size_t shape = rng.below(spec.shapes.size());
            labels.emplace_back(static_cast<int>(color), static_cast<int>(shape));
            const Tensor img = render_shape(spec, sample_render_params(spec, color, shape, rng.next_u64()));
            // 8-bit quantization as in the PNG files, then noise augmentation:
            // additive Gaussian and blending with uniform noise.
            const double sigma = rng.uniform(0.0, 0.2);
            const double keep = rng.uniform() < 0.25 ? 1.0 : rng.uniform(0.25, 1.0);
            auto dst = x.row(n);
            for (std::size_t k = 0; k < dst.size(); ++k) {
                const double v = std::round(img[k] * 255.0) / 255.0;
                dst[k] = std::clamp(keep * v + (1.0 - keep) * rng.uniform() + sigma * rng.normal(), 0.0, 1.0);
            }
        }
        nn::ParamGrads grads = clf.net().zero_grads();
        clf.loss_and_grads(x, labels, &grads);
        opt.step(clf.net().parameters(), grads, schedule(step));
    }
    return clf;
}

double agreement(const ShapeClassifier& clf, const Tensor& images, const std::vector<std::pair<int, int>>& labels) {
    const auto pred = clf.predict(images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        hits += pred[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace jem::testing

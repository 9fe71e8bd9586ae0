#include "jem/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "jem/container.hpp"
#include "jem/error.hpp"

namespace jem {
namespace {

constexpr int kTowerVersion = 1;
constexpr double kNormTolerance = 1e-6;

void validate_pixels(const Tensor& t) {
    if (t.rank() != 4 || t.dim(1) != 3) {
        throw InputError("images must be (batch, 3, H, W), got " + shape_string(t.shape()));
    }
    if (t.dim(0) < 1) {
        throw InputError("image batch must be non-empty");
    }
}

nn::Sequential build_vision_net(const TowerConfig& config, Rng& rng) {
    nn::Sequential net;
    std::size_t channels = 3;
    std::size_t extent = config.resolution;
    for (std::size_t width : config.channels) {
        net.push(nn::Conv2d::make(channels, width, 3, 2, 1, rng));
        net.push(nn::SiLU{});
        channels = width;
        extent = (extent + 1) / 2;
    }
    net.push(nn::Linear::make(channels * extent * extent, config.embed_dim, rng));
    return net;
}

nlohmann::json config_to_json(const TowerConfig& c) {
    return {{"resolution", c.resolution}, {"embed_dim", c.embed_dim},   {"channels", c.channels},
            {"vocabulary", c.vocabulary}, {"max_len", c.max_len},       {"seed", c.seed},
            {"logit_scale", c.logit_scale}};
}

TowerConfig config_from_json(const nlohmann::json& j) {
    TowerConfig c;
    c.resolution = j.at("resolution").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.channels = j.at("channels").get<std::vector<std::size_t>>();
    c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.logit_scale = j.at("logit_scale").get<double>();
    return c;
}

std::vector<Tensor*> tower_tensors(TowerPair& towers) {
    std::vector<Tensor*> out = towers.vision.net.parameters();
    out.push_back(&towers.text.table);
    return out;
}

std::vector<const Tensor*> tower_tensors(const TowerPair& towers) {
    std::vector<const Tensor*> out = towers.vision.net.parameters();
    out.push_back(&towers.text.table);
    return out;
}

}  // namespace

// ---------------------------------------------------------------- images

ImageTensor::ImageTensor(Tensor data) : data_(std::move(data)) {
    validate_pixels(data_);
    for (double v : data_.values()) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw InputError("image values must be finite and within [0, 1]");
        }
    }
}

ImageTensor ImageTensor::clamped(Tensor data) {
    for (double& v : data.values()) {
        if (std::isfinite(v)) {
            v = std::clamp(v, 0.0, 1.0);
        }
    }
    return ImageTensor(std::move(data));
}

ImageTensor concat(const ImageTensor& a, const ImageTensor& b) {
    return ImageTensor(concat_rows(a.tensor(), b.tensor()));
}

// ---------------------------------------------------------------- text

TextTokens TextTokens::slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) {
        rows.push_back(i);
    }
    return select(rows);
}

TextTokens TextTokens::select(std::span<const std::size_t> rows) const {
    TextTokens out;
    out.max_len = max_len;
    for (std::size_t r : rows) {
        if (r >= batch()) {
            throw InputError("token row out of range");
        }
        const auto src = row(r);
        out.ids.insert(out.ids.end(), src.begin(), src.end());
        out.lengths.push_back(lengths[r]);
    }
    return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {}

std::vector<std::int32_t> Vocabulary::tokenize(const std::string& caption) const {
    std::vector<std::int32_t> ids;
    std::istringstream stream(caption);
    std::string word;
    while (stream >> word) {
        std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
        const auto it = std::find(words_.begin(), words_.end(), word);
        if (it == words_.end()) {
            throw InputError("out-of-vocabulary word '" + word + "' in caption \"" + caption + "\"");
        }
        ids.push_back(static_cast<std::int32_t>(std::distance(words_.begin(), it) + 1));
    }
    return ids;
}

TextTokens Vocabulary::encode(const std::vector<std::string>& captions, std::size_t max_len) const {
    TextTokens tokens;
    tokens.max_len = max_len;
    tokens.ids.assign(captions.size() * max_len, 0);
    for (std::size_t n = 0; n < captions.size(); ++n) {
        const auto ids = tokenize(captions[n]);
        if (ids.empty()) {
            throw InputError("empty caption");
        }
        if (ids.size() > max_len) {
            throw InputError("caption \"" + captions[n] + "\" exceeds max_len " + std::to_string(max_len));
        }
        std::copy(ids.begin(), ids.end(), tokens.ids.begin() + static_cast<std::ptrdiff_t>(n * max_len));
        tokens.lengths.push_back(ids.size());
    }
    return tokens;
}

// ---------------------------------------------------------------- embeddings

Embedding::Embedding(Tensor unit_rows) : vec_(std::move(unit_rows)) {
    if (vec_.rank() != 2) {
        throw InputError("embedding must be (batch, dim)");
    }
    for (std::size_t n = 0; n < vec_.dim(0); ++n) {
        if (std::abs(l2_norm(vec_.row(n)) - 1.0) > kNormTolerance) {
            throw InputError("embedding row " + std::to_string(n) + " is not unit norm");
        }
    }
}

Embedding Embedding::normalize(const Tensor& raw) {
    if (raw.rank() != 2) {
        throw InputError("embedding must be (batch, dim)");
    }
    Tensor out = raw;
    for (std::size_t n = 0; n < out.dim(0); ++n) {
        auto r = out.row(n);
        const double norm = l2_norm(r);
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw NumericError("cannot normalize a zero or non-finite feature row");
        }
        for (double& v : r) {
            v /= norm;
        }
    }
    return Embedding(std::move(out));
}

// ---------------------------------------------------------------- towers

std::vector<std::string> TowerConfig::validate() const {
    std::vector<std::string> problems;
    if (resolution == 0) {
        problems.emplace_back("resolution must be positive");
    }
    if (embed_dim == 0) {
        problems.emplace_back("embed_dim must be positive");
    }
    if (channels.empty()) {
        problems.emplace_back("channels must list at least one conv width");
    }
    if (std::any_of(channels.begin(), channels.end(), [](std::size_t c) { return c == 0; })) {
        problems.emplace_back("channel widths must be positive");
    }
    if (vocabulary.empty()) {
        problems.emplace_back("vocabulary must be non-empty");
    }
    if (max_len == 0) {
        problems.emplace_back("max_len must be positive");
    }
    if (!(logit_scale > 0.0)) {
        problems.emplace_back("logit_scale must be > 0");
    }
    return problems;
}

TowerPair make_toy_towers(const TowerConfig& config) {
    if (const auto problems = config.validate(); !problems.empty()) {
        std::string msg = "invalid tower config:";
        for (const auto& p : problems) {
            msg += " " + p + ";";
        }
        throw ConfigError(msg);
    }
    TowerPair towers;
    towers.config = config;
    towers.vocab = Vocabulary(config.vocabulary);
    Rng rng(derive_seed(config.seed, "towers"));
    towers.vision.net = build_vision_net(config, rng);
    towers.vision.resolution = config.resolution;
    towers.text.table = rng.normal_tensor({towers.vocab.size(), config.embed_dim});
    towers.logit_scale = config.logit_scale;
    return towers;
}

ImagePass forward_image(const TowerPair& towers, const Tensor& pixels) {
    validate_pixels(pixels);
    if (pixels.dim(2) != towers.vision.resolution || pixels.dim(3) != towers.vision.resolution) {
        throw ConfigError("vision tower expects " + std::to_string(towers.vision.resolution) + "x" +
                          std::to_string(towers.vision.resolution) + " images, got " + shape_string(pixels.shape()));
    }
    ImagePass pass;
    pass.raw = towers.vision.net.forward(pixels, &pass.tape);
    pass.embedding = Embedding::normalize(pass.raw);
    return pass;
}

Tensor backward_image(const TowerPair& towers, const ImagePass& pass, const Tensor& grad_embedding,
                      nn::ParamGrads* param_grads) {
    // e = r / |r|  =>  dr = (de - e <e, de>) / |r|
    const Tensor& e = pass.embedding.tensor();
    if (grad_embedding.shape() != e.shape()) {
        throw InputError("embedding gradient shape mismatch");
    }
    Tensor grad_raw(e.shape());
    for (std::size_t n = 0; n < e.dim(0); ++n) {
        const auto er = e.row(n);
        const auto ge = grad_embedding.row(n);
        const double norm = l2_norm(pass.raw.row(n));
        const double proj = dot(er, ge);
        auto out = grad_raw.row(n);
        for (std::size_t i = 0; i < er.size(); ++i) {
            out[i] = (ge[i] - er[i] * proj) / norm;
        }
    }
    return towers.vision.net.backward(pass.tape, grad_raw, param_grads);
}

Embedding encode_image(const TowerPair& towers, const ImageTensor& images) {
    validate_pixels(images.tensor());
    if (images.height() != towers.vision.resolution || images.width() != towers.vision.resolution) {
        throw ConfigError("vision tower expects " + std::to_string(towers.vision.resolution) + "x" +
                          std::to_string(towers.vision.resolution) + " images, got " +
                          shape_string(images.shape()));
    }
    return Embedding::normalize(towers.vision.net.forward(images.tensor()));
}

namespace {

Tensor text_features(const TowerPair& towers, const TextTokens& texts) {
    const std::size_t dim = towers.embed_dim();
    const auto vocab = static_cast<std::int32_t>(towers.text.table.dim(0));
    Tensor raw({texts.batch(), dim});
    for (std::size_t n = 0; n < texts.batch(); ++n) {
        const std::size_t len = texts.lengths[n];
        if (len == 0 || len > texts.max_len) {
            throw InputError("token length out of range");
        }
        auto out = raw.row(n);
        const auto ids = texts.row(n);
        for (std::size_t t = 0; t < len; ++t) {
            if (ids[t] <= 0 || ids[t] >= vocab) {
                throw InputError("token id " + std::to_string(ids[t]) + " outside vocabulary");
            }
            const auto emb = towers.text.table.row(static_cast<std::size_t>(ids[t]));
            for (std::size_t i = 0; i < dim; ++i) {
                out[i] += emb[i] / static_cast<double>(len);
            }
        }
    }
    return raw;
}

}  // namespace

Embedding encode_text(const TowerPair& towers, const TextTokens& texts) {
    return Embedding::normalize(text_features(towers, texts));
}

void backward_text(const TowerPair& towers, const TextTokens& texts, const Tensor& grad_embedding,
                   Tensor& grad_table) {
    if (grad_table.shape() != towers.text.table.shape()) {
        throw InputError("text gradient buffer shape mismatch");
    }
    if (towers.text.frozen) {
        return;
    }
    const Tensor raw = text_features(towers, texts);
    const Embedding emb = Embedding::normalize(raw);
    for (std::size_t n = 0; n < texts.batch(); ++n) {
        const auto e = emb.row(n);
        const auto ge = grad_embedding.row(n);
        const double norm = l2_norm(raw.row(n));
        const double proj = dot(e, ge);
        const std::size_t len = texts.lengths[n];
        for (std::size_t t = 0; t < len; ++t) {
            auto g = grad_table.row(static_cast<std::size_t>(texts.row(n)[t]));
            for (std::size_t i = 0; i < e.size(); ++i) {
                g[i] += (ge[i] - e[i] * proj) / norm / static_cast<double>(len);
            }
        }
    }
}

// ---------------------------------------------------------------- checkpoints

std::vector<std::string> tower_tensor_names(const TowerPair& towers) {
    std::vector<std::string> names;
    for (const auto& n : towers.vision.net.parameter_names()) {
        names.push_back("vision." + n);
    }
    names.emplace_back("text.table");
    return names;
}

void save_checkpoint(const TowerPair& towers, const std::filesystem::path& path) {
    nlohmann::json header = {{"kind", "towers"},
                             {"version", kTowerVersion},
                             {"config", config_to_json(towers.config)},
                             {"vision_trainable", towers.vision.trainable},
                             {"text_frozen", towers.text.frozen},
                             {"logit_scale_frozen", towers.logit_scale_frozen}};
    const auto tensors = tower_tensors(towers);
    const auto names = tower_tensor_names(towers);
    const Tensor scale({1}, {towers.logit_scale});
    std::vector<std::pair<std::string, const Tensor*>> entries;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        entries.emplace_back(names[i], tensors[i]);
    }
    entries.emplace_back("logit_scale", &scale);
    container::write(path, header, entries);
}

TowerPair load_checkpoint(const std::filesystem::path& path) {
    const container::Contents contents = container::read(path, "towers", kTowerVersion);
    TowerPair towers;
    try {
        towers = make_toy_towers(config_from_json(contents.header.at("config")));
        towers.vision.trainable = contents.header.at("vision_trainable").get<bool>();
        towers.text.frozen = contents.header.at("text_frozen").get<bool>();
        towers.logit_scale_frozen = contents.header.at("logit_scale_frozen").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed tower header: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint holds an invalid config: ") + e.what());
    }
    const auto names = tower_tensor_names(towers);
    auto tensors = tower_tensors(towers);
    if (contents.tensors.size() != names.size() + 1) {
        throw LoadError("checkpoint tensor count does not match architecture");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        const Tensor& stored = contents.get(names[i]);
        if (stored.shape() != tensors[i]->shape()) {
            throw LoadError("shape mismatch for " + names[i] + ": " + shape_string(stored.shape()) + " vs " +
                            shape_string(tensors[i]->shape()));
        }
        *tensors[i] = stored;
    }
    const Tensor& scale = contents.get("logit_scale");
    if (scale.size() != 1 || !(scale[0] > 0.0)) {
        throw LoadError("invalid logit_scale in checkpoint");
    }
    towers.logit_scale = scale[0];
    return towers;
}

TowerPair import_pretrained(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw LoadError("cannot open import manifest: " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed import manifest: ") + e.what());
    }
    TowerPair towers;
    try {
        towers = make_toy_towers(config_from_json(manifest.at("config")));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("import manifest config: ") + e.what());
    }
    const auto names = tower_tensor_names(towers);
    auto tensors = tower_tensors(towers);
    const auto base = manifest_path.parent_path();
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!manifest.at("tensors").contains(names[i])) {
            throw LoadError("import manifest does not map '" + names[i] + "'");
        }
        const auto& entry = manifest["tensors"][names[i]];
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape_size(shape) != tensors[i]->size()) {
            throw LoadError("import shape mismatch for " + names[i]);
        }
        const std::string dtype = entry.value("dtype", "f32");
        std::ifstream blob(base / entry.at("file").get<std::string>(), std::ios::binary);
        if (!blob) {
            throw LoadError("cannot open tensor file for " + names[i]);
        }
        std::vector<char> raw((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
        const std::size_t n = tensors[i]->size();
        if (dtype == "f32" && raw.size() == n * sizeof(float)) {
            for (std::size_t k = 0; k < n; ++k) {
                float v;
                std::memcpy(&v, raw.data() + k * sizeof(float), sizeof(float));
                (*tensors[i])[k] = v;
            }
        } else if (dtype == "f64" && raw.size() == n * sizeof(double)) {
            std::memcpy(tensors[i]->data(), raw.data(), n * sizeof(double));
        } else {
            throw LoadError("tensor file for " + names[i] + " has wrong size or dtype '" + dtype + "'");
        }
    }
    towers.logit_scale = manifest.value("logit_scale", towers.config.logit_scale);
    return towers;
}

std::string file_id(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream out;
    out << std::hex << container::fnv1a(bytes);
    return out.str();
}

}  // namespace jem

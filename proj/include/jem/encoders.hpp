#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jem/nn.hpp"
#include "jem/tensor.hpp"

namespace jem {

// Batch of RGB images, (batch, 3, height, width), every value finite and in
// [0, 1]. Construction validates; samplers and attackers clamp before
// building one.
class ImageTensor {
public:
    explicit ImageTensor(Tensor data);
    // Clamps into [0, 1] first. Non-finite values still fail validation.
    static ImageTensor clamped(Tensor data);

    const Tensor& tensor() const noexcept { return data_; }
    std::size_t batch() const { return data_.dim(0); }
    std::size_t height() const { return data_.dim(2); }
    std::size_t width() const { return data_.dim(3); }
    Shape shape() const { return data_.shape(); }

    ImageTensor slice(std::size_t begin, std::size_t end) const { return ImageTensor(data_.slice_rows(begin, end)); }

private:
    Tensor data_;
};

ImageTensor concat(const ImageTensor& a, const ImageTensor& b);

// Padded token ids, row-major (batch, max_len). Id 0 is padding.
struct TextTokens {
    std::size_t max_len = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> lengths;

    std::size_t batch() const noexcept { return lengths.size(); }
    std::span<const std::int32_t> row(std::size_t n) const {
        return std::span<const std::int32_t>(ids).subspan(n * max_len, max_len);
    }
    TextTokens slice(std::size_t begin, std::size_t end) const;
    // Rows picked by index, in the given order.
    TextTokens select(std::span<const std::size_t> rows) const;
};

// Whitespace word vocabulary; id 0 is reserved for padding.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    std::size_t size() const noexcept { return words_.size() + 1; }
    const std::vector<std::string>& words() const noexcept { return words_; }

    std::vector<std::int32_t> tokenize(const std::string& caption) const;
    TextTokens encode(const std::vector<std::string>& captions, std::size_t max_len) const;

private:
    std::vector<std::string> words_;
};

// Rows of unit L2 norm (within 1e-6), shape (batch, dim).
class Embedding {
public:
    explicit Embedding(Tensor unit_rows);
    static Embedding normalize(const Tensor& raw);

    const Tensor& tensor() const noexcept { return vec_; }
    std::size_t batch() const { return vec_.dim(0); }
    std::size_t dim() const { return vec_.dim(1); }
    std::span<const double> row(std::size_t n) const { return vec_.row(n); }

private:
    Tensor vec_;
};

struct TowerConfig {
    std::size_t resolution = 32;
    std::size_t embed_dim = 64;
    std::vector<std::size_t> channels{16, 32, 64};
    std::vector<std::string> vocabulary;
    std::size_t max_len = 8;
    std::uint64_t seed = 0;
    double logit_scale = 10.0;

    // Empty when valid.
    std::vector<std::string> validate() const;
};

struct VisionTower {
    nn::Sequential net;
    std::size_t resolution = 0;
    bool trainable = true;
};

// Mean-of-embeddings bag over the vocabulary.
struct TextTower {
    Tensor table;  // (vocab size, dim); row 0 is padding and never read
    bool frozen = true;
};

struct TowerPair {
    TowerConfig config;
    Vocabulary vocab;
    VisionTower vision;
    TextTower text;
    double logit_scale = 10.0;
    bool logit_scale_frozen = true;

    std::size_t embed_dim() const { return config.embed_dim; }
    TextTokens tokenize(const std::vector<std::string>& captions) const {
        return vocab.encode(captions, config.max_len);
    }
};

TowerPair make_toy_towers(const TowerConfig& config);

// Forward record for the vision tower; everything needed to backpropagate.
struct ImagePass {
    nn::Tape tape;
    Tensor raw;
    Embedding embedding{Tensor({1, 1}, 1.0)};
};

// Unchecked-range forward: pixels may leave [0, 1] (noisy evaluation
// points). Shape is still validated.
ImagePass forward_image(const TowerPair& towers, const Tensor& pixels);

// Returns d loss / d pixels given d loss / d embedding. Vision-tower
// parameter gradients are accumulated into param_grads when non-null.
Tensor backward_image(const TowerPair& towers, const ImagePass& pass, const Tensor& grad_embedding,
                      nn::ParamGrads* param_grads);

Embedding encode_image(const TowerPair& towers, const ImageTensor& images);
Embedding encode_text(const TowerPair& towers, const TextTokens& texts);

// Gradient of a loss w.r.t. the text table through encode_text. A frozen
// tower leaves grad_table untouched (all zero).
void backward_text(const TowerPair& towers, const TextTokens& texts, const Tensor& grad_embedding, Tensor& grad_table);

// Checkpoint container: magic, JSON header (version, config, shapes, flags),
// little-endian float64 parameter blobs in declared order, checksum trailer.
void save_checkpoint(const TowerPair& towers, const std::filesystem::path& path);
TowerPair load_checkpoint(const std::filesystem::path& path);

// Imports externally produced weights through a JSON manifest mapping every
// parameter name to a raw little-endian tensor file.
TowerPair import_pretrained(const std::filesystem::path& manifest_path);

// Names of all tower tensors in checkpoint order ("vision.<i>.weight", ...,
// "text.table").
std::vector<std::string> tower_tensor_names(const TowerPair& towers);

// Content hash of a checkpoint file, used as its id in run manifests.
std::string file_id(const std::filesystem::path& path);

}  // namespace jem

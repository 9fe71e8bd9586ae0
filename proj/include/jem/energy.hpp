#pragma once

#include <functional>
#include <vector>

#include "jem/encoders.hpp"

namespace jem {

// values(k, j) = cosine(image j, text k) = -E(I_j, T_k). Columns
// [0, positive_count) are the matched positives (column k belongs to text k),
// the remaining columns are generated negatives, one per text.
struct EnergyMatrix {
    Tensor values;
    std::size_t positive_count = 0;

    std::size_t texts() const { return values.dim(0); }
    std::size_t columns() const { return values.dim(1); }
};

// E(I_k, T_k) = -<f_I(I_k), f_T(T_k)> for each pair.
std::vector<double> joint_energy(const Embedding& images, const Embedding& texts);
std::vector<double> joint_energy(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts);

EnergyMatrix energy_matrix(const Embedding& positives, const Embedding& negatives, const Embedding& texts);
EnergyMatrix build_energy_matrix(const TowerPair& towers, const ImageTensor& positives, const ImageTensor& negatives,
                                 const TextTokens& texts);

// Text-anchored cross-entropy: mean over rows k of
// -log softmax(logit_scale * row_k)[k]. grad (optional) receives
// d loss / d values.
double contrastive_energy_loss(const EnergyMatrix& matrix, double logit_scale, Tensor* grad = nullptr);

struct ClipLoss {
    double value = 0.0;
    Tensor grad_image;  // d loss / d image embedding
    Tensor grad_text;   // d loss / d text embedding
};

// Symmetric B x B contrastive loss: mean of image->text and text->image
// cross-entropies with diagonal targets.
ClipLoss clip_contrastive_loss(const Embedding& images, const Embedding& texts, double logit_scale);

// Image-embedding gradient of contrastive_energy_loss, split into the
// positive and negative image blocks.
struct EnergyLossGrads {
    double value = 0.0;
    Tensor grad_positive;
    Tensor grad_negative;
};
EnergyLossGrads contrastive_energy_loss_grads(const Embedding& positives, const Embedding& negatives,
                                              const Embedding& texts, double logit_scale);

// Scalar objective of a pixel batch. Writes d value / d pixels into grad when
// non-null. Tower parameters never receive gradient through these.
using PixelObjective = std::function<double(const Tensor& pixels, Tensor* grad)>;

// ClipLoss of f_I(pixels) against fixed text embeddings (batch-coupled).
PixelObjective clip_loss_objective(const TowerPair& towers, Embedding texts);
// Mean joint energy, mean_k -cos(f_I(pixels_k), text_k).
PixelObjective mean_energy_objective(const TowerPair& towers, Embedding texts);

}  // namespace jem

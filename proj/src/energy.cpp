#include "jem/energy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "jem/error.hpp"

namespace jem {
namespace {

void require_same_batch(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw InputError(std::string(what) + ": batch mismatch (" + std::to_string(a) + " vs " + std::to_string(b) +
                         ")");
    }
}

void require_same_dim(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim()) {
        throw InputError("embedding dimension mismatch");
    }
}

// Stable log-sum-exp of scale * values over the span.
double log_sum_exp(std::span<const double> row, double scale) {
    double peak = -std::numeric_limits<double>::infinity();
    for (double v : row) {
        peak = std::max(peak, scale * v);
    }
    double acc = 0.0;
    for (double v : row) {
        acc += std::exp(scale * v - peak);
    }
    return peak + std::log(acc);
}

}  // namespace

std::vector<double> joint_energy(const Embedding& images, const Embedding& texts) {
    require_same_batch(images.batch(), texts.batch(), "joint_energy");
    require_same_dim(images, texts);
    std::vector<double> energies(images.batch());
    for (std::size_t k = 0; k < images.batch(); ++k) {
        energies[k] = -dot(images.row(k), texts.row(k));
    }
    return energies;
}

std::vector<double> joint_energy(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts) {
    require_same_batch(images.batch(), texts.batch(), "joint_energy");
    return joint_energy(encode_image(towers, images), encode_text(towers, texts));
}

EnergyMatrix energy_matrix(const Embedding& positives, const Embedding& negatives, const Embedding& texts) {
    require_same_batch(positives.batch(), texts.batch(), "energy matrix positives");
    require_same_batch(negatives.batch(), texts.batch(), "energy matrix negatives");
    require_same_dim(positives, texts);
    require_same_dim(negatives, texts);
    const std::size_t b = texts.batch();
    EnergyMatrix m{Tensor({b, 2 * b}), b};
    for (std::size_t k = 0; k < b; ++k) {
        auto row = m.values.row(k);
        for (std::size_t j = 0; j < b; ++j) {
            row[j] = dot(positives.row(j), texts.row(k));
            row[b + j] = dot(negatives.row(j), texts.row(k));
        }
    }
    return m;
}

EnergyMatrix build_energy_matrix(const TowerPair& towers, const ImageTensor& positives, const ImageTensor& negatives,
                                 const TextTokens& texts) {
    require_same_batch(positives.batch(), texts.batch(), "energy matrix positives");
    require_same_batch(negatives.batch(), texts.batch(), "energy matrix negatives");
    return energy_matrix(encode_image(towers, positives), encode_image(towers, negatives), encode_text(towers, texts));
}

double contrastive_energy_loss(const EnergyMatrix& matrix, double logit_scale, Tensor* grad) {
    if (!(logit_scale > 0.0)) {
        throw InputError("logit_scale must be > 0");
    }
    if (!matrix.values.all_finite()) {
        throw NumericError("energy matrix has non-finite entries");
    }
    const std::size_t rows = matrix.texts();
    if (matrix.positive_count != rows || matrix.columns() < rows) {
        throw InputError("energy matrix must hold one matched positive per text row");
    }
    if (grad != nullptr) {
        *grad = Tensor(matrix.values.shape());
    }
    double loss = 0.0;
    for (std::size_t k = 0; k < rows; ++k) {
        const auto row = matrix.values.row(k);
        const double lse = log_sum_exp(row, logit_scale);
        loss += lse - logit_scale * row[k];
        if (grad != nullptr) {
            auto g = grad->row(k);
            for (std::size_t j = 0; j < row.size(); ++j) {
                const double p = std::exp(logit_scale * row[j] - lse);
                g[j] = logit_scale * (p - (j == k ? 1.0 : 0.0)) / static_cast<double>(rows);
            }
        }
    }
    return loss / static_cast<double>(rows);
}

EnergyLossGrads contrastive_energy_loss_grads(const Embedding& positives, const Embedding& negatives,
                                              const Embedding& texts, double logit_scale) {
    const EnergyMatrix m = energy_matrix(positives, negatives, texts);
    Tensor dm;
    EnergyLossGrads out;
    out.value = contrastive_energy_loss(m, logit_scale, &dm);
    const std::size_t b = texts.batch();
    const std::size_t d = texts.dim();
    out.grad_positive = Tensor({b, d});
    out.grad_negative = Tensor({b, d});
    for (std::size_t k = 0; k < b; ++k) {
        const auto t = texts.row(k);
        const auto g = dm.row(k);
        for (std::size_t j = 0; j < b; ++j) {
            auto gp = out.grad_positive.row(j);
            auto gn = out.grad_negative.row(j);
            for (std::size_t i = 0; i < d; ++i) {
                gp[i] += g[j] * t[i];
                gn[i] += g[b + j] * t[i];
            }
        }
    }
    return out;
}

ClipLoss clip_contrastive_loss(const Embedding& images, const Embedding& texts, double logit_scale) {
    require_same_batch(images.batch(), texts.batch(), "clip_contrastive_loss");
    require_same_dim(images, texts);
    if (!(logit_scale > 0.0)) {
        throw InputError("logit_scale must be > 0");
    }
    const std::size_t b = images.batch();
    const std::size_t d = images.dim();
    // logits(i, j) = s * <image i, text j>
    Tensor logits({b, b});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            logits[i * b + j] = logit_scale * dot(images.row(i), texts.row(j));
        }
    }
    if (!logits.all_finite()) {
        throw NumericError("non-finite similarity in clip_contrastive_loss");
    }
    Tensor g({b, b});  // d loss / d logits
    double image_to_text = 0.0;
    double text_to_image = 0.0;
    const double inv = 1.0 / (2.0 * static_cast<double>(b));
    for (std::size_t i = 0; i < b; ++i) {
        const auto row = logits.row(i);
        const double lse = log_sum_exp(row, 1.0);
        image_to_text += lse - row[i];
        for (std::size_t j = 0; j < b; ++j) {
            g[i * b + j] += (std::exp(row[j] - lse) - (i == j ? 1.0 : 0.0)) * inv;
        }
    }
    std::vector<double> column(b);
    for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t i = 0; i < b; ++i) {
            column[i] = logits[i * b + j];
        }
        const double lse = log_sum_exp(column, 1.0);
        text_to_image += lse - column[j];
        for (std::size_t i = 0; i < b; ++i) {
            g[i * b + j] += (std::exp(column[i] - lse) - (i == j ? 1.0 : 0.0)) * inv;
        }
    }
    ClipLoss out;
    out.value = (image_to_text + text_to_image) * inv;
    out.grad_image = Tensor({b, d});
    out.grad_text = Tensor({b, d});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            const double w = logit_scale * g[i * b + j];
            const auto ti = texts.row(j);
            const auto ii = images.row(i);
            auto gi = out.grad_image.row(i);
            auto gt = out.grad_text.row(j);
            for (std::size_t k = 0; k < d; ++k) {
                gi[k] += w * ti[k];
                gt[k] += w * ii[k];
            }
        }
    }
    return out;
}

PixelObjective clip_loss_objective(const TowerPair& towers, Embedding texts) {
    return [&towers, texts = std::move(texts)](const Tensor& pixels, Tensor* grad) {
        const ImagePass pass = forward_image(towers, pixels);
        ClipLoss loss = clip_contrastive_loss(pass.embedding, texts, towers.logit_scale);
        if (grad != nullptr) {
            *grad = backward_image(towers, pass, loss.grad_image, nullptr);
        }
        return loss.value;
    };
}

PixelObjective mean_energy_objective(const TowerPair& towers, Embedding texts) {
    return [&towers, texts = std::move(texts)](const Tensor& pixels, Tensor* grad) {
        const ImagePass pass = forward_image(towers, pixels);
        const std::vector<double> energies = joint_energy(pass.embedding, texts);
        const double b = static_cast<double>(energies.size());
        double mean = 0.0;
        for (double e : energies) {
            mean += e / b;
        }
        if (grad != nullptr) {
            Tensor d_emb = texts.tensor();
            d_emb *= -1.0 / b;
            *grad = backward_image(towers, pass, d_emb, nullptr);
        }
        return mean;
    };
}

}  // namespace jem

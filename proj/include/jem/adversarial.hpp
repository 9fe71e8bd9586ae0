#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jem/energy.hpp"
#include "jem/nn.hpp"

namespace jem {

enum class Norm { L2, Linf };

std::string to_string(Norm norm);
Norm parse_norm(const std::string& text);

// PGD budget. epsilon is in [0,1]-scale pixel units. For L2, alpha1 is an
// absolute step length along the normalized gradient; for Linf the step is
// alpha1 * epsilon along the gradient sign.
struct AdvBudget {
    Norm norm = Norm::L2;
    double epsilon = 3.0;
    double alpha1 = 1.5;
    std::size_t t_adv = 5;

    std::vector<std::string> validate() const;

    // L2, eps 3.0, alpha1 1.5, 5 steps.
    static AdvBudget training_default() { return {}; }
    // Linf, eps 2/255, 10 steps of eps/4.
    static AdvBudget metric_default() { return {Norm::Linf, 2.0 / 255.0, 0.25, 10}; }
};

// Per-image norm of a (batch, ...) tensor row.
double row_norm(std::span<const double> row, Norm norm);

struct PgdStep {
    std::size_t step = 0;
    double objective = 0.0;   // value at the point the gradient was taken
    const Tensor* delta = nullptr;      // after projection and clamping
    const Tensor* perturbed = nullptr;  // images + delta, within [0, 1]
};
using PgdObserver = std::function<void(const PgdStep&)>;

// Projected gradient ascent on `objective` starting from delta = 0. Each step
// moves along the norm's steepest-ascent direction, projects delta back onto
// the epsilon ball and clamps images + delta into [0, 1].
Tensor pgd_ascent(const PixelObjective& objective, const Tensor& images, const AdvBudget& budget,
                  const PgdObserver& observer = {});

// Ascends clip_contrastive_loss. seed is recorded for interface uniformity;
// delta starts at zero, so crafting itself is deterministic.
ImageTensor craft_adversarial(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                              const AdvBudget& budget, std::uint64_t seed, const PgdObserver& observer = {});

struct AdversarialLoss {
    double value = 0.0;
    nn::ParamGrads grads;  // vision-tower parameter gradients of value
    ImageTensor adversarial;
};

// Crafts adversarial images (no parameter gradient during crafting), then
// evaluates clip_contrastive_loss on them with parameter gradients.
AdversarialLoss adversarial_loss(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                                 const AdvBudget& budget, std::uint64_t seed);

struct LossAndGrads {
    double value = 0.0;
    nn::ParamGrads grads;
};

// clip_contrastive_loss(f_I(images), f_T(texts)) with vision-parameter grads.
LossAndGrads clip_loss_with_param_grads(const TowerPair& towers, const Tensor& images, const Embedding& texts);

}  // namespace jem

#include "jem/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include "jem/error.hpp"

namespace jem {

std::string to_string(Norm norm) { return norm == Norm::L2 ? "l2" : "linf"; }

Norm parse_norm(const std::string& text) {
    if (text == "l2" || text == "L2") {
        return Norm::L2;
    }
    if (text == "linf" || text == "Linf" || text == "LINF") {
        return Norm::Linf;
    }
    throw ConfigError("unknown norm '" + text + "' (expected l2 or linf)");
}

std::vector<std::string> AdvBudget::validate() const {
    std::vector<std::string> problems;
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
        problems.emplace_back("adv epsilon must be >= 0");
    }
    if (t_adv > 0 && !(alpha1 > 0.0)) {
        problems.emplace_back("adv alpha1 must be > 0 when t_adv > 0");
    }
    return problems;
}

double row_norm(std::span<const double> row, Norm norm) {
    if (norm == Norm::L2) {
        return l2_norm(row);
    }
    double worst = 0.0;
    for (double v : row) {
        worst = std::max(worst, std::abs(v));
    }
    return worst;
}

Tensor pgd_ascent(const PixelObjective& objective, const Tensor& images, const AdvBudget& budget,
                  const PgdObserver& observer) {
    if (const auto problems = budget.validate(); !problems.empty()) {
        throw ConfigError(problems.front());
    }
    if (budget.epsilon == 0.0 || budget.t_adv == 0) {
        return images;
    }
    Tensor delta = Tensor::zeros_like(images);
    Tensor perturbed = images;
    Tensor grad;
    const std::size_t batch = images.dim(0);
    for (std::size_t step = 0; step < budget.t_adv; ++step) {
        const double value = objective(perturbed, &grad);
        if (!std::isfinite(value) || !grad.all_finite()) {
            throw NumericError("non-finite objective or gradient at PGD step " + std::to_string(step));
        }
        for (std::size_t n = 0; n < batch; ++n) {
            auto d = delta.row(n);
            const auto g = grad.row(n);
            if (budget.norm == Norm::L2) {
                const double gnorm = l2_norm(g);
                if (gnorm > 0.0) {
                    for (std::size_t i = 0; i < d.size(); ++i) {
                        d[i] += budget.alpha1 * g[i] / gnorm;
                    }
                }
                const double dnorm = l2_norm(d);
                if (dnorm > budget.epsilon) {
                    const double shrink = budget.epsilon / dnorm;
                    for (double& v : d) {
                        v *= shrink;
                    }
                }
            } else {
                const double step_size = budget.alpha1 * budget.epsilon;
                for (std::size_t i = 0; i < d.size(); ++i) {
                    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
                    d[i] = std::clamp(d[i] + step_size * s, -budget.epsilon, budget.epsilon);
                }
            }
            const auto x = images.row(n);
            auto p = perturbed.row(n);
            for (std::size_t i = 0; i < d.size(); ++i) {
                p[i] = std::clamp(x[i] + d[i], 0.0, 1.0);
                d[i] = p[i] - x[i];
            }
        }
        if (observer) {
            observer(PgdStep{step, value, &delta, &perturbed});
        }
    }
    return perturbed;
}

ImageTensor craft_adversarial(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                              const AdvBudget& budget, std::uint64_t /*seed*/, const PgdObserver& observer) {
    if (images.batch() != texts.batch()) {
        throw InputError("craft_adversarial: image/text batch mismatch");
    }
    if (budget.epsilon == 0.0 || budget.t_adv == 0) {
        return images;
    }
    const PixelObjective objective = clip_loss_objective(towers, encode_text(towers, texts));
    return ImageTensor(pgd_ascent(objective, images.tensor(), budget, observer));
}

LossAndGrads clip_loss_with_param_grads(const TowerPair& towers, const Tensor& images, const Embedding& texts) {
    const ImagePass pass = forward_image(towers, images);
    const ClipLoss loss = clip_contrastive_loss(pass.embedding, texts, towers.logit_scale);
    LossAndGrads out{loss.value, towers.vision.net.zero_grads()};
    backward_image(towers, pass, loss.grad_image, &out.grads);
    return out;
}

AdversarialLoss adversarial_loss(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                                 const AdvBudget& budget, std::uint64_t seed) {
    ImageTensor adversarial = craft_adversarial(towers, images, texts, budget, seed);
    LossAndGrads loss = clip_loss_with_param_grads(towers, adversarial.tensor(), encode_text(towers, texts));
    if (!std::isfinite(loss.value)) {
        throw NumericError("non-finite adversarial loss");
    }
    return {loss.value, std::move(loss.grads), std::move(adversarial)};
}

}  // namespace jem

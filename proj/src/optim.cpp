#include "jem/optim.hpp"

#include <cmath>
#include <numbers>

#include "jem/error.hpp"

namespace jem {

WarmupCosine::WarmupCosine(double peak, std::size_t warmup_steps, std::size_t total_steps)
    : peak_(peak), warmup_(warmup_steps), total_(total_steps) {
    if (!(peak > 0.0)) {
        throw ConfigError("learning rate must be > 0");
    }
    if (warmup_steps > total_steps) {
        throw ConfigError("warmup_steps must not exceed total_steps");
    }
}

double WarmupCosine::operator()(std::size_t step) const {
    if (step < warmup_) {
        return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    }
    if (total_ <= warmup_ + 1) {
        return peak_;
    }
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_) / static_cast<double>(total_ - warmup_ - 1));
    return 0.5 * peak_ * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const std::vector<const Tensor*>& params, AdamWConfig config) : config_(config) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
        m_.push_back(Tensor::zeros_like(*p));
        v_.push_back(Tensor::zeros_like(*p));
    }
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw InputError("optimizer parameter count mismatch");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        if (g.shape() != p.shape()) {
            throw InputError("gradient shape mismatch for parameter " + std::to_string(k));
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
            p[i] -= lr * (update + config_.weight_decay * p[i]);
        }
    }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor& g : grads) {
        for (double x : g.values()) {
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (Tensor& g : grads) {
            g *= scale;
        }
    }
    return norm;
}

}  // namespace jem

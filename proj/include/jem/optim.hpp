#pragma once

#include <cstddef>
#include <vector>

#include "jem/tensor.hpp"

namespace jem {

// Linear warmup to peak over warmup_steps (step s gets peak * (s + 1) /
// warmup), then half-cosine from peak at s = warmup to 0 at the last step.
class WarmupCosine {
public:
    WarmupCosine(double peak, std::size_t warmup_steps, std::size_t total_steps);
    double operator()(std::size_t step) const;

private:
    double peak_;
    std::size_t warmup_;
    std::size_t total_;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay, p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
public:
    AdamW() = default;
    AdamW(const std::vector<const Tensor*>& params, AdamWConfig config);

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);

    const AdamWConfig& config() const noexcept { return config_; }
    std::size_t steps_taken() const noexcept { return t_; }
    std::vector<Tensor>& first_moments() noexcept { return m_; }
    std::vector<Tensor>& second_moments() noexcept { return v_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }
    void set_steps_taken(std::size_t t) noexcept { t_ = t; }

private:
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

// Scales grads in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace jem

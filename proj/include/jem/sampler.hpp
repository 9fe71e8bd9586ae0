#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "jem/energy.hpp"

namespace jem {

enum class SamplerInit { Uniform01, Provided };

// Training mode descends the batch-coupled ClipLoss of the generated images
// (negatives for the energy loss); inference mode descends the mean pairwise
// energy, i.e. maximizes each image's cosine similarity to its own prompt.
enum class SamplerMode { Training, Inference };

struct SamplerConfig {
    std::size_t steps = 50;
    double step_size = 0.025;
    double momentum_beta1 = 0.0;
    double adaptive_beta2 = 0.999;
    // false replaces the adaptive update by a plain (momentum) gradient step.
    bool adaptive = true;
    double adaptive_eps = 1e-8;
    double weight_decay = 0.0;
    double noise_scale = 0.0;
    bool clamp = true;
    SamplerInit init = SamplerInit::Uniform01;
    SamplerMode mode = SamplerMode::Inference;
    std::uint64_t seed = 0;

    std::vector<std::string> validate() const;

    // 50 steps, lr 0.025, no momentum, no noise.
    static SamplerConfig inference_default();
    // 50 steps, lr 0.025, momentum 0.9, noise 0.01, ClipLoss objective.
    static SamplerConfig training_default();
};

struct SampleTrace {
    ImageTensor final;
    // Mean joint energy of the clean iterate before each step and after the
    // last one: steps + 1 entries.
    std::vector<double> energy_trace;
    std::uint64_t seed = 0;
};

// I.i.d. Uniform[0, 1) pixels, or `provided` passed through unchanged.
ImageTensor draw_initial(const Shape& shape, SamplerInit init, std::uint64_t seed,
                         const ImageTensor* provided = nullptr);

// Pixel-space optimizer used for both negatives and inference generation.
// objective is evaluated on x + noise_scale * n with fresh n ~ N(0, I) each
// step; probe (mean energy of the clean iterate) fills the trace. When probe
// is empty the objective value itself is recorded.
SampleTrace optimize_pixels(const PixelObjective& objective, const PixelObjective& probe, ImageTensor initial,
                            const SamplerConfig& config);

SampleTrace generate(const TowerPair& towers, const TextTokens& texts, const SamplerConfig& config,
                     const ImageTensor* provided = nullptr);

struct SgldStep {
    Tensor next;           // drift + noise
    Tensor deterministic;  // x - (alpha / 2) dE/dx
    Tensor noise;          // ~ N(0, alpha I)
};

// x' = x - (alpha/2) dE/dx + e,  e ~ N(0, alpha I).
SgldStep sgld_step(const PixelObjective& energy, const Tensor& x, double alpha, std::uint64_t seed);
// Same update with caller-supplied standard-normal noise (scaled by sqrt(alpha)).
SgldStep sgld_step_with_noise(const PixelObjective& energy, const Tensor& x, double alpha,
                              const Tensor& standard_noise);

// Energy with an analytic Hessian-vector product, for the Taylor check.
struct AnalyticEnergy {
    PixelObjective value;
    std::function<Tensor(const Tensor& x, const Tensor& v)> hessian_vector;
};

struct TaylorReport {
    double eps_scale = 0.0;
    std::size_t probes = 0;
    // max over probes of |grad E(x + e) - grad E(x) - H(x) e|_inf, e = eps_scale * n
    double max_residual = 0.0;
};

// First-order check of the noisy-gradient expansion. The residual must vanish
// quadratically in eps_scale for a smooth energy.
TaylorReport taylor_noise_check(const AnalyticEnergy& energy, const Tensor& x, double eps_scale, std::uint64_t seed,
                                std::size_t probes = 16);

}  // namespace jem

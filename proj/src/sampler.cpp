#include "jem/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "jem/error.hpp"
#include "jem/rng.hpp"

namespace jem {

std::vector<std::string> SamplerConfig::validate() const {
    std::vector<std::string> problems;
    if (steps > 0 && !(step_size > 0.0)) {
        problems.emplace_back("sampler step_size must be > 0 when steps > 0");
    }
    if (!(momentum_beta1 >= 0.0 && momentum_beta1 < 1.0)) {
        problems.emplace_back("sampler momentum_beta1 must be in [0, 1)");
    }
    if (!(adaptive_beta2 >= 0.0 && adaptive_beta2 < 1.0)) {
        problems.emplace_back("sampler adaptive_beta2 must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        problems.emplace_back("sampler weight_decay must be >= 0");
    }
    if (!(noise_scale >= 0.0)) {
        problems.emplace_back("sampler noise_scale must be >= 0");
    }
    if (!(adaptive_eps > 0.0)) {
        problems.emplace_back("sampler adaptive_eps must be > 0");
    }
    return problems;
}

SamplerConfig SamplerConfig::inference_default() { return SamplerConfig{}; }

SamplerConfig SamplerConfig::training_default() {
    SamplerConfig c;
    c.momentum_beta1 = 0.9;
    c.noise_scale = 0.01;
    c.mode = SamplerMode::Training;
    return c;
}

ImageTensor draw_initial(const Shape& shape, SamplerInit init, std::uint64_t seed, const ImageTensor* provided) {
    if (init == SamplerInit::Provided) {
        if (provided == nullptr) {
            throw InputError("init=provided requires an image tensor");
        }
        return *provided;
    }
    Rng rng(derive_seed(seed, "sampler-init"));
    return ImageTensor(rng.uniform_tensor(shape));
}

SampleTrace optimize_pixels(const PixelObjective& objective, const PixelObjective& probe, ImageTensor initial,
                            const SamplerConfig& config) {
    if (const auto problems = config.validate(); !problems.empty()) {
        throw ConfigError(problems.front());
    }
    SampleTrace trace{std::move(initial), {}, config.seed};
    if (config.steps == 0) {
        if (probe) {
            trace.energy_trace.push_back(probe(trace.final.tensor(), nullptr));
        } else {
            trace.energy_trace.push_back(objective(trace.final.tensor(), nullptr));
        }
        return trace;
    }
    Tensor x = trace.final.tensor();
    Tensor m = Tensor::zeros_like(x);
    Tensor v = Tensor::zeros_like(x);
    Tensor grad;
    Rng noise_rng(derive_seed(config.seed, "sampler-noise"));
    const bool noisy = config.noise_scale > 0.0;
    double beta1_power = 1.0;
    double beta2_power = 1.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
        double value = 0.0;
        if (noisy) {
            Tensor point = x;
            for (double& p : point.values()) {
                p += config.noise_scale * noise_rng.normal();
            }
            value = objective(point, &grad);
        } else {
            value = objective(x, &grad);
        }
        if (!std::isfinite(value) || !grad.all_finite()) {
            throw NumericError("non-finite sampler objective or gradient at step " + std::to_string(step));
        }
        trace.energy_trace.push_back(probe ? probe(x, nullptr) : value);

        beta1_power *= config.momentum_beta1;
        beta2_power *= config.adaptive_beta2;
        const double correction1 = 1.0 - beta1_power;
        const double correction2 = 1.0 - beta2_power;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double g = grad[i];
            m[i] = config.momentum_beta1 * m[i] + (1.0 - config.momentum_beta1) * g;
            double update = m[i] / correction1;
            if (config.adaptive) {
                v[i] = config.adaptive_beta2 * v[i] + (1.0 - config.adaptive_beta2) * g * g;
                update /= std::sqrt(v[i] / correction2) + config.adaptive_eps;
            }
            x[i] -= config.step_size * (update + config.weight_decay * x[i]);
            if (config.clamp) {
                x[i] = std::clamp(x[i], 0.0, 1.0);
            }
        }
    }
    trace.energy_trace.push_back(probe ? probe(x, nullptr) : objective(x, nullptr));
    if (!std::isfinite(trace.energy_trace.back())) {
        throw NumericError("non-finite sampler energy after step " + std::to_string(config.steps));
    }
    // Without clamping the iterate may leave [0, 1]; it is still returned
    // clamped so the result is a valid encoder input.
    trace.final = config.clamp ? ImageTensor(std::move(x)) : ImageTensor::clamped(std::move(x));
    return trace;
}

SampleTrace generate(const TowerPair& towers, const TextTokens& texts, const SamplerConfig& config,
                     const ImageTensor* provided) {
    const Embedding text_emb = encode_text(towers, texts);
    const std::size_t r = towers.vision.resolution;
    ImageTensor initial = draw_initial({texts.batch(), 3, r, r}, config.init, config.seed, provided);
    if (initial.batch() != texts.batch()) {
        throw InputError("provided initial images do not match the prompt batch");
    }
    PixelObjective energy = mean_energy_objective(towers, text_emb);
    if (config.mode == SamplerMode::Inference && config.noise_scale == 0.0) {
        return optimize_pixels(energy, {}, std::move(initial), config);
    }
    PixelObjective objective =
        config.mode == SamplerMode::Training ? clip_loss_objective(towers, text_emb) : energy;
    return optimize_pixels(objective, energy, std::move(initial), config);
}

SgldStep sgld_step_with_noise(const PixelObjective& energy, const Tensor& x, double alpha,
                              const Tensor& standard_noise) {
    if (!(alpha > 0.0)) {
        throw ConfigError("sgld alpha must be > 0");
    }
    if (standard_noise.shape() != x.shape()) {
        throw InputError("sgld noise shape mismatch");
    }
    Tensor grad;
    energy(x, &grad);
    SgldStep out;
    out.deterministic = x;
    out.deterministic.add_scaled(grad, -alpha / 2.0);
    out.noise = standard_noise * std::sqrt(alpha);
    out.next = out.deterministic + out.noise;
    return out;
}

SgldStep sgld_step(const PixelObjective& energy, const Tensor& x, double alpha, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "sgld"));
    return sgld_step_with_noise(energy, x, alpha, rng.normal_tensor(x.shape()));
}

TaylorReport taylor_noise_check(const AnalyticEnergy& energy, const Tensor& x, double eps_scale, std::uint64_t seed,
                                std::size_t probes) {
    TaylorReport report{eps_scale, probes, 0.0};
    Rng rng(derive_seed(seed, "taylor"));
    Tensor base_grad;
    energy.value(x, &base_grad);
    Tensor shifted_grad;
    for (std::size_t p = 0; p < probes; ++p) {
        const Tensor eps = rng.normal_tensor(x.shape(), 1.0) * eps_scale;
        energy.value(x + eps, &shifted_grad);
        const Tensor predicted = base_grad + energy.hessian_vector(x, eps);
        report.max_residual = std::max(report.max_residual, max_abs_diff(shifted_grad, predicted));
    }
    return report;
}

}  // namespace jem

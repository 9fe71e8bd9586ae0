#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jem/dataset.hpp"
#include "jem/encoders.hpp"
#include "jem/nn.hpp"

namespace jem {

// alpha_bar[t] for t = 0 .. T-1, strictly decreasing, inside (0, 1).
struct NoiseSchedule {
    std::vector<double> alpha_bar;

    std::size_t size() const noexcept { return alpha_bar.size(); }
    void validate() const;

    // Linear in alpha_bar from `first` down to `last`.
    static NoiseSchedule linear(std::size_t steps, double first = 0.999, double last = 0.002);

    nlohmann::json to_json() const;
    // {"type": "linear", "steps", "first", "last"} or {"alpha_bar": [...]}.
    static NoiseSchedule from_json(const nlohmann::json& j);
};

NoiseSchedule load_schedule_manifest(const std::filesystem::path& path);

// Unconditional epsilon-prediction model on data scaled to [-1, 1].
struct DenoiserHandle {
    std::function<Tensor(const Tensor& x_t, std::size_t t)> predict_noise;
    NoiseSchedule schedule;
    std::size_t resolution = 0;

    void validate() const;
};

enum class GuidanceAnneal { Constant, Linear };

struct GuidanceConfig {
    double scale = 0.0;
    std::size_t ddim_steps = 25;
    double eta = 0.0;  // only the deterministic sampler is implemented
    GuidanceAnneal anneal = GuidanceAnneal::Constant;
    std::uint64_t seed = 0;

    std::vector<std::string> validate() const;
};

// Descending timesteps visited by a DDIM run of `steps` steps.
std::vector<std::size_t> ddim_timesteps(std::size_t schedule_size, std::size_t steps);

// Deterministic DDIM from seeded N(0, I) noise. Returns images in [0, 1].
ImageTensor ddim_sample(const DenoiserHandle& denoiser, const GuidanceConfig& config, std::size_t batch);

// DDIM where each clean estimate x0_hat (in [-1, 1]) is moved once by
//   x0_hat += s * d cos(f_I(x0_hat), f_T(text)) / d x0_hat
// and clamped before the next state is formed. One text broadcasts over the
// batch; otherwise the text batch must equal `batch`.
ImageTensor guided_ddim_sample(const DenoiserHandle& denoiser, const TowerPair& towers, const TextTokens& text,
                               const GuidanceConfig& config, std::size_t batch);

// d cos(f_I(image_k), f_T(text_k)) / d image for every k (image in [0, 1]).
// Images of a different resolution are bilinearly resized before encoding.
Tensor guidance_gradient(const TowerPair& towers, const ImageTensor& image, const TextTokens& text);

// Bilinear resize of NCHW, half-pixel centers, and its adjoint.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_bilinear_backward(const Tensor& grad_out, std::size_t in_h, std::size_t in_w);

struct ToyDenoiserConfig {
    std::size_t resolution = 32;
    std::size_t width = 16;      // full-resolution channels
    std::size_t width_low = 32;  // half-resolution channels
    std::uint64_t seed = 0;
};

// Two-level U-Net: the timestep enters as a constant t/T input plane, one
// skip connection joins the full-resolution encoder and decoder features.
class ToyDenoiser {
public:
    ToyDenoiser() = default;
    ToyDenoiser(const ToyDenoiserConfig& config, NoiseSchedule schedule);

    const ToyDenoiserConfig& config() const noexcept { return config_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }

    Tensor predict(const Tensor& x_t, std::size_t t) const;
    // Mean squared error to `noise` and its parameter gradients.
    double loss_and_grads(const Tensor& x_t, const std::vector<std::size_t>& t, const Tensor& noise,
                          nn::ParamGrads* grads) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    nn::ParamGrads zero_grads() const;

    DenoiserHandle handle() const;

    void save(const std::filesystem::path& path) const;
    static ToyDenoiser load(const std::filesystem::path& path);

private:
    Tensor with_time_plane(const Tensor& x_t, const std::vector<std::size_t>& t) const;

    ToyDenoiserConfig config_;
    NoiseSchedule schedule_;
    nn::Sequential enc_;   // (3 + 1) -> width, full resolution
    nn::Sequential down_;  // width -> width_low, half resolution
    nn::Sequential up_;    // width_low -> width, back to full resolution
    nn::Sequential head_;  // 2 * width -> 3
};

struct DenoiserTrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 16;
    double lr = 2e-3;
    std::size_t timesteps = 200;
    ToyDenoiserConfig model;
    std::uint64_t seed = 0;
};

// Epsilon-prediction training on the dataset images mapped to [-1, 1].
ToyDenoiser train_toy_denoiser(const DenoiserTrainConfig& config, const PairedDataset& dataset,
                               const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace jem

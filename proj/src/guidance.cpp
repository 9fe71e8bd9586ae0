#include "jem/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "jem/container.hpp"
#include "jem/error.hpp"
#include "jem/optim.hpp"
#include "jem/rng.hpp"

namespace jem {
namespace {

constexpr int kDenoiserVersion = 1;

// Concatenates two NCHW tensors along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.dim(0);
    const std::size_t plane = a.dim(2) * a.dim(3);
    const std::size_t ca = a.dim(1);
    const std::size_t cb = b.dim(1);
    Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        auto dst = out.row(i);
        const auto ra = a.row(i);
        const auto rb = b.row(i);
        std::copy(ra.begin(), ra.end(), dst.begin());
        std::copy(rb.begin(), rb.end(), dst.begin() + ca * plane);
    }
    return out;
}

void split_channels(const Tensor& x, std::size_t ca, Tensor& a, Tensor& b) {
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    const std::size_t plane = x.dim(2) * x.dim(3);
    a = Tensor({n, ca, x.dim(2), x.dim(3)});
    b = Tensor({n, c - ca, x.dim(2), x.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = x.row(i);
        std::copy(src.begin(), src.begin() + ca * plane, a.row(i).begin());
        std::copy(src.begin() + ca * plane, src.end(), b.row(i).begin());
    }
}

struct Tap {
    std::size_t i0, i1;
    double w;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(src));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
}

Tensor to_unit_range(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.values()) {
        v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    }
    return out;
}

// Shared DDIM loop; `guide` (may be empty) edits x0_hat in place at step i.
ImageTensor ddim_run(const DenoiserHandle& denoiser, const GuidanceConfig& config, std::size_t batch,
                     const std::function<void(std::size_t, Tensor&)>& guide) {
    denoiser.validate();
    if (const auto problems = config.validate(); !problems.empty()) {
        throw ConfigError(problems.front());
    }
    if (batch == 0) {
        throw InputError("batch must be >= 1");
    }
    const std::vector<std::size_t> times = ddim_timesteps(denoiser.schedule.size(), config.ddim_steps);
    const std::size_t r = denoiser.resolution;
    Rng rng(derive_seed(config.seed, "ddim-init"));
    Tensor x = rng.normal_tensor({batch, 3, r, r});
    for (std::size_t i = 0; i < times.size(); ++i) {
        const double ab = denoiser.schedule.alpha_bar[times[i]];
        const double ab_prev = i + 1 < times.size() ? denoiser.schedule.alpha_bar[times[i + 1]] : 1.0;
        const Tensor eps = denoiser.predict_noise(x, times[i]);
        if (eps.shape() != x.shape() || !eps.all_finite()) {
            throw NumericError("denoiser returned an invalid prediction at DDIM step " + std::to_string(i));
        }
        const double sa = std::sqrt(ab);
        const double sb = std::sqrt(1.0 - ab);
        Tensor x0(x.shape());
        for (std::size_t k = 0; k < x.size(); ++k) {
            x0[k] = std::clamp((x[k] - sb * eps[k]) / sa, -1.0, 1.0);
        }
        if (guide) {
            guide(i, x0);
        }
        const double sa_prev = std::sqrt(ab_prev);
        const double sb_prev = std::sqrt(1.0 - ab_prev);
        for (std::size_t k = 0; k < x.size(); ++k) {
            x[k] = sa_prev * x0[k] + sb_prev * eps[k];
        }
    }
    return ImageTensor(to_unit_range(x));
}

}  // namespace

void NoiseSchedule::validate() const {
    if (alpha_bar.empty()) {
        throw ConfigError("noise schedule is empty");
    }
    for (std::size_t t = 0; t < alpha_bar.size(); ++t) {
        if (!(alpha_bar[t] > 0.0 && alpha_bar[t] < 1.0)) {
            throw ConfigError("alpha_bar[" + std::to_string(t) + "] must lie in (0, 1)");
        }
        if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) {
            throw ConfigError("alpha_bar must be strictly decreasing (index " + std::to_string(t) + ")");
        }
    }
}

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double first, double last) {
    if (steps < 2) {
        throw ConfigError("linear schedule needs at least 2 steps");
    }
    NoiseSchedule s;
    s.alpha_bar.resize(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        s.alpha_bar[t] = first + (last - first) * static_cast<double>(t) / static_cast<double>(steps - 1);
    }
    s.validate();
    return s;
}

nlohmann::json NoiseSchedule::to_json() const { return {{"alpha_bar", alpha_bar}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    try {
        if (j.contains("alpha_bar")) {
            NoiseSchedule s{j.at("alpha_bar").get<std::vector<double>>()};
            s.validate();
            return s;
        }
        if (j.value("type", "") == "linear") {
            return linear(j.at("steps").get<std::size_t>(), j.value("first", 0.999), j.value("last", 0.002));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed schedule manifest: ") + e.what());
    }
    throw ConfigError("schedule manifest needs 'alpha_bar' or type 'linear'");
}

NoiseSchedule load_schedule_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    try {
        return NoiseSchedule::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("schedule manifest is not JSON: " + std::string(e.what()));
    }
}

void DenoiserHandle::validate() const {
    if (!predict_noise) {
        throw ConfigError("denoiser handle has no predictor");
    }
    if (resolution == 0) {
        throw ConfigError("denoiser resolution must be >= 1");
    }
    schedule.validate();
}

std::vector<std::string> GuidanceConfig::validate() const {
    std::vector<std::string> p;
    if (ddim_steps < 1) {
        p.emplace_back("ddim_steps must be >= 1");
    }
    if (!(scale >= 0.0) || !std::isfinite(scale)) {
        p.emplace_back("guidance scale must be >= 0");
    }
    if (eta != 0.0) {
        p.emplace_back("only eta = 0 (deterministic DDIM) is supported");
    }
    return p;
}

std::vector<std::size_t> ddim_timesteps(std::size_t schedule_size, std::size_t steps) {
    if (steps == 0 || steps > schedule_size) {
        throw ConfigError("ddim_steps (" + std::to_string(steps) + ") must be in [1, " +
                          std::to_string(schedule_size) + "]");
    }
    std::vector<std::size_t> t(steps);
    if (steps == 1) {
        t[0] = schedule_size - 1;
        return t;
    }
    for (std::size_t i = 0; i < steps; ++i) {
        const double frac = static_cast<double>(steps - 1 - i) / static_cast<double>(steps - 1);
        t[i] = static_cast<std::size_t>(std::lround(frac * static_cast<double>(schedule_size - 1)));
    }
    return t;
}

ImageTensor ddim_sample(const DenoiserHandle& denoiser, const GuidanceConfig& config, std::size_t batch) {
    return ddim_run(denoiser, config, batch, {});
}

ImageTensor guided_ddim_sample(const DenoiserHandle& denoiser, const TowerPair& towers, const TextTokens& text,
                               const GuidanceConfig& config, std::size_t batch) {
    if (text.batch() != 1 && text.batch() != batch) {
        throw InputError("guidance text batch must be 1 or equal to the sample batch");
    }
    TextTokens texts = text;
    if (text.batch() == 1 && batch > 1) {
        const std::vector<std::size_t> rows(batch, 0);
        texts = text.select(rows);
    }
    const std::size_t steps = config.ddim_steps;
    auto guide = [&](std::size_t i, Tensor& x0) {
        double s = config.scale;
        if (config.anneal == GuidanceAnneal::Linear) {
            s *= 1.0 - static_cast<double>(i) / static_cast<double>(steps);
        }
        const Tensor grad = guidance_gradient(towers, ImageTensor(to_unit_range(x0)), texts);
        if (!grad.all_finite()) {
            throw NumericError("non-finite guidance gradient at DDIM step " + std::to_string(i));
        }
        // pixels = (x0 + 1) / 2, so d/dx0 = 0.5 d/dpixels
        for (std::size_t k = 0; k < x0.size(); ++k) {
            x0[k] = std::clamp(x0[k] + s * 0.5 * grad[k], -1.0, 1.0);
        }
    };
    return ddim_run(denoiser, config, batch, guide);
}

Tensor guidance_gradient(const TowerPair& towers, const ImageTensor& image, const TextTokens& text) {
    if (text.batch() != image.batch()) {
        throw InputError("guidance_gradient: image/text batch mismatch");
    }
    const Embedding t = encode_text(towers, text);
    const std::size_t r = towers.vision.resolution;
    const bool resize = image.height() != r || image.width() != r;
    const Tensor pixels = resize ? resize_bilinear(image.tensor(), r, r) : image.tensor();
    const ImagePass pass = forward_image(towers, pixels);
    // cos = <e, t> for unit e and t.
    Tensor grad = backward_image(towers, pass, t.tensor(), nullptr);
    return resize ? resize_bilinear_backward(grad, image.height(), image.width()) : grad;
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 4 || out_h == 0 || out_w == 0) {
        throw InputError("resize_bilinear expects NCHW input and a non-empty output size");
    }
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ty = taps(h, out_h);
    const auto tx = taps(w, out_w);
    Tensor out({n, c, out_h, out_w});
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* src = x.data() + p * h * w;
        double* dst = out.data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[ox];
                const double top = (1.0 - b.w) * src[a.i0 * w + b.i0] + b.w * src[a.i0 * w + b.i1];
                const double bot = (1.0 - b.w) * src[a.i1 * w + b.i0] + b.w * src[a.i1 * w + b.i1];
                dst[oy * out_w + ox] = (1.0 - a.w) * top + a.w * bot;
            }
        }
    }
    return out;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, std::size_t in_h, std::size_t in_w) {
    const std::size_t n = grad_out.dim(0), c = grad_out.dim(1), out_h = grad_out.dim(2), out_w = grad_out.dim(3);
    const auto ty = taps(in_h, out_h);
    const auto tx = taps(in_w, out_w);
    Tensor grad({n, c, in_h, in_w});
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* g = grad_out.data() + p * out_h * out_w;
        double* dst = grad.data() + p * in_h * in_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const Tap& b = tx[ox];
                const double v = g[oy * out_w + ox];
                dst[a.i0 * in_w + b.i0] += (1.0 - a.w) * (1.0 - b.w) * v;
                dst[a.i0 * in_w + b.i1] += (1.0 - a.w) * b.w * v;
                dst[a.i1 * in_w + b.i0] += a.w * (1.0 - b.w) * v;
                dst[a.i1 * in_w + b.i1] += a.w * b.w * v;
            }
        }
    }
    return grad;
}

ToyDenoiser::ToyDenoiser(const ToyDenoiserConfig& config, NoiseSchedule schedule)
    : config_(config), schedule_(std::move(schedule)) {
    schedule_.validate();
    if (config.resolution < 4 || config.resolution % 2 != 0 || config.width == 0 || config.width_low == 0) {
        throw ConfigError("toy denoiser needs an even resolution >= 4 and non-zero widths");
    }
    Rng rng(derive_seed(config.seed, "denoiser-init"));
    const std::size_t w = config.width;
    const std::size_t wl = config.width_low;
    enc_.push(nn::Conv2d::make(4, w, 3, 1, 1, rng));
    enc_.push(nn::SiLU{});
    down_.push(nn::Conv2d::make(w, wl, 3, 2, 1, rng));
    down_.push(nn::SiLU{});
    down_.push(nn::Conv2d::make(wl, wl, 3, 1, 1, rng));
    down_.push(nn::SiLU{});
    up_.push(nn::Conv2d::make(wl, w, 3, 1, 1, rng));
    up_.push(nn::SiLU{});
    up_.push(nn::Upsample2x{});
    head_.push(nn::Conv2d::make(2 * w, w, 3, 1, 1, rng));
    head_.push(nn::SiLU{});
    nn::Conv2d out = nn::Conv2d::make(w, 3, 3, 1, 1, rng);
    out.weight *= 0.1;
    head_.push(std::move(out));
}

Tensor ToyDenoiser::with_time_plane(const Tensor& x_t, const std::vector<std::size_t>& t) const {
    const std::size_t r = config_.resolution;
    if (x_t.rank() != 4 || x_t.dim(1) != 3 || x_t.dim(2) != r || x_t.dim(3) != r) {
        throw InputError("denoiser expects (batch, 3, " + std::to_string(r) + ", " + std::to_string(r) +
                         "), got " + shape_string(x_t.shape()));
    }
    const std::size_t n = x_t.dim(0);
    const std::size_t plane = r * r;
    Tensor in({n, 4, r, r});
    for (std::size_t i = 0; i < n; ++i) {
        if (t[i] >= schedule_.size()) {
            throw InputError("timestep out of range");
        }
        const auto src = x_t.row(i);
        auto dst = in.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
        const double tv = static_cast<double>(t[i]) / static_cast<double>(schedule_.size() - 1);
        std::fill(dst.begin() + 3 * plane, dst.end(), tv);
    }
    return in;
}

Tensor ToyDenoiser::predict(const Tensor& x_t, std::size_t t) const {
    const Tensor in = with_time_plane(x_t, std::vector<std::size_t>(x_t.dim(0), t));
    const Tensor h1 = enc_.forward(in);
    const Tensor u = up_.forward(down_.forward(h1));
    return head_.forward(concat_channels(u, h1));
}

double ToyDenoiser::loss_and_grads(const Tensor& x_t, const std::vector<std::size_t>& t, const Tensor& noise,
                                   nn::ParamGrads* grads) const {
    if (t.size() != x_t.dim(0) || noise.shape() != x_t.shape()) {
        throw InputError("denoiser loss: mismatched inputs");
    }
    nn::Tape te, td, tu, th;
    const Tensor h1 = enc_.forward(with_time_plane(x_t, t), &te);
    const Tensor h2 = down_.forward(h1, &td);
    const Tensor u = up_.forward(h2, &tu);
    const Tensor pred = head_.forward(concat_channels(u, h1), &th);
    double loss = 0.0;
    Tensor g(pred.shape());
    const double inv = 1.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - noise[i];
        loss += d * d * inv;
        g[i] = 2.0 * d * inv;
    }
    if (grads == nullptr) {
        return loss;
    }
    nn::ParamGrads ge = enc_.zero_grads(), gd = down_.zero_grads(), gu = up_.zero_grads(), gh = head_.zero_grads();
    const Tensor gc = head_.backward(th, g, &gh);
    Tensor g_up, g_skip;
    split_channels(gc, config_.width, g_up, g_skip);
    const Tensor g_h2 = up_.backward(tu, g_up, &gu);
    Tensor g_h1 = down_.backward(td, g_h2, &gd);
    g_h1 += g_skip;
    enc_.backward(te, g_h1, &ge);
    grads->clear();
    for (auto* part : {&ge, &gd, &gu, &gh}) {
        for (auto& x : *part) {
            grads->push_back(std::move(x));
        }
    }
    return loss;
}

std::vector<Tensor*> ToyDenoiser::parameters() {
    std::vector<Tensor*> out;
    for (auto* net : {&enc_, &down_, &up_, &head_}) {
        for (Tensor* p : net->parameters()) {
            out.push_back(p);
        }
    }
    return out;
}

std::vector<const Tensor*> ToyDenoiser::parameters() const {
    std::vector<const Tensor*> out;
    for (const auto* net : {&enc_, &down_, &up_, &head_}) {
        for (const Tensor* p : net->parameters()) {
            out.push_back(p);
        }
    }
    return out;
}

nn::ParamGrads ToyDenoiser::zero_grads() const {
    nn::ParamGrads out;
    for (const Tensor* p : parameters()) {
        out.push_back(Tensor::zeros_like(*p));
    }
    return out;
}

DenoiserHandle ToyDenoiser::handle() const {
    // The handle shares this model by reference.
    return {[this](const Tensor& x, std::size_t t) { return predict(x, t); }, schedule_, config_.resolution};
}

void ToyDenoiser::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["kind"] = "denoiser";
    header["version"] = kDenoiserVersion;
    header["config"] = {{"resolution", config_.resolution},
                        {"width", config_.width},
                        {"width_low", config_.width_low},
                        {"seed", config_.seed}};
    header["schedule"] = schedule_.to_json();
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    const auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        tensors.emplace_back("param." + std::to_string(i), params[i]);
    }
    container::write(path, header, tensors);
}

ToyDenoiser ToyDenoiser::load(const std::filesystem::path& path) {
    const container::Contents contents = container::read(path, "denoiser", kDenoiserVersion);
    ToyDenoiser model;
    try {
        const auto& c = contents.header.at("config");
        ToyDenoiserConfig config{c.at("resolution"), c.at("width"), c.at("width_low"), c.at("seed")};
        model = ToyDenoiser(config, NoiseSchedule::from_json(contents.header.at("schedule")));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed denoiser header: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("denoiser checkpoint holds an invalid config: ") + e.what());
    }
    const auto params = model.parameters();
    if (contents.tensors.size() != params.size()) {
        throw LoadError("denoiser tensor count does not match architecture");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& stored = contents.get("param." + std::to_string(i));
        if (stored.shape() != params[i]->shape()) {
            throw LoadError("denoiser parameter " + std::to_string(i) + " has the wrong shape");
        }
        *params[i] = stored;
    }
    return model;
}

ToyDenoiser train_toy_denoiser(const DenoiserTrainConfig& config, const PairedDataset& dataset,
                               const std::function<void(std::size_t, double)>& on_step) {
    if (config.steps == 0 || config.batch == 0) {
        throw ConfigError("denoiser training needs steps >= 1 and batch >= 1");
    }
    ToyDenoiserConfig model_config = config.model;
    model_config.resolution = dataset.resolution();
    ToyDenoiser model(model_config, NoiseSchedule::linear(config.timesteps));
    AdamW opt(std::as_const(model).parameters(), {0.9, 0.999, 1e-8, 0.0});
    const WarmupCosine schedule(config.lr, std::min<std::size_t>(100, config.steps), config.steps);
    const NoiseSchedule& ns = model.schedule();
    for (std::size_t step = 0; step < config.steps; ++step) {
        Rng rng(derive_seed(config.seed, "denoiser-step", step));
        std::vector<std::size_t> idx(config.batch);
        std::vector<std::size_t> t(config.batch);
        for (std::size_t i = 0; i < config.batch; ++i) {
            idx[i] = rng.below(dataset.size());
            t[i] = rng.below(ns.size());
        }
        const Batch batch = dataset.batch(idx);
        Tensor noise = rng.normal_tensor(batch.images.shape());
        Tensor x_t = batch.images.tensor();
        for (std::size_t i = 0; i < config.batch; ++i) {
            const double sa = std::sqrt(ns.alpha_bar[t[i]]);
            const double sb = std::sqrt(1.0 - ns.alpha_bar[t[i]]);
            auto xr = x_t.row(i);
            const auto nr = noise.row(i);
            for (std::size_t k = 0; k < xr.size(); ++k) {
                xr[k] = sa * (2.0 * xr[k] - 1.0) + sb * nr[k];
            }
        }
        nn::ParamGrads grads;
        const double loss = model.loss_and_grads(x_t, t, noise, &grads);
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite denoiser loss at step " + std::to_string(step));
        }
        clip_global_norm(grads, 1.0);
        opt.step(model.parameters(), grads, schedule(step));
        if (on_step) {
            on_step(step, loss);
        }
    }
    return model;
}

}  // namespace jem

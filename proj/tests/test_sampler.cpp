#include <gtest/gtest.h>

#include <cmath>

#include "jem/error.hpp"
#include "jem/sampler.hpp"
#include "support/test_util.hpp"

using namespace jem;

namespace {

// E(x) = |x - c|^2 / 2
PixelObjective quadratic(const Tensor& c) {
    return [c](const Tensor& x, Tensor* grad) {
        const Tensor d = x - c;
        if (grad != nullptr) {
            *grad = d;
        }
        return 0.5 * dot(d.values(), d.values());
    };
}

// E(x) = sum x^4 / 4, H = diag(3 x^2)
AnalyticEnergy quartic() {
    AnalyticEnergy e;
    e.value = [](const Tensor& x, Tensor* grad) {
        double s = 0.0;
        if (grad != nullptr) {
            *grad = Tensor::zeros_like(x);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            s += std::pow(x[i], 4) / 4.0;
            if (grad != nullptr) {
                (*grad)[i] = std::pow(x[i], 3);
            }
        }
        return s;
    };
    e.hessian_vector = [](const Tensor& x, const Tensor& v) {
        Tensor out = Tensor::zeros_like(x);
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = 3.0 * x[i] * x[i] * v[i];
        }
        return out;
    };
    return e;
}

SamplerConfig degenerate(double lr) {
    SamplerConfig c;
    c.steps = 1;
    c.step_size = lr;
    c.momentum_beta1 = 0.0;
    c.adaptive_beta2 = 0.0;
    c.weight_decay = 0.0;
    c.noise_scale = 0.0;
    c.clamp = false;
    c.init = SamplerInit::Provided;
    return c;
}

}  // namespace

TEST(Sampler, Defaults) {
    const SamplerConfig inf = SamplerConfig::inference_default();
    EXPECT_EQ(inf.steps, 50u);
    EXPECT_EQ(inf.step_size, 0.025);
    EXPECT_EQ(inf.momentum_beta1, 0.0);
    EXPECT_EQ(inf.noise_scale, 0.0);
    EXPECT_EQ(inf.weight_decay, 0.0);
    EXPECT_EQ(inf.mode, SamplerMode::Inference);
    const SamplerConfig tr = SamplerConfig::training_default();
    EXPECT_EQ(tr.steps, 50u);
    EXPECT_EQ(tr.step_size, 0.025);
    EXPECT_EQ(tr.momentum_beta1, 0.9);
    EXPECT_EQ(tr.noise_scale, 0.01);
    EXPECT_EQ(tr.mode, SamplerMode::Training);
}

TEST(Sampler, InitialDraw) {
    const ImageTensor a = draw_initial({2, 3, 8, 8}, SamplerInit::Uniform01, 5);
    const ImageTensor b = draw_initial({2, 3, 8, 8}, SamplerInit::Uniform01, 5);
    const ImageTensor c = draw_initial({2, 3, 8, 8}, SamplerInit::Uniform01, 6);
    EXPECT_EQ(a.tensor(), b.tensor());
    EXPECT_FALSE(a.tensor() == c.tensor());
    double mean = 0.0;
    for (double v : a.tensor().values()) {
        mean += v / static_cast<double>(a.tensor().size());
    }
    EXPECT_NEAR(mean, 0.5, 0.08);
    const ImageTensor provided = jem::testing::random_images(1, 3, 8);
    EXPECT_EQ(draw_initial({1, 3, 8, 8}, SamplerInit::Provided, 0, &provided).tensor(), provided.tensor());
    EXPECT_THROW(draw_initial({1, 3, 8, 8}, SamplerInit::Provided, 0), InputError);
}

TEST(Sampler, ZeroStepsReturnsInitialDraw) {
    const TowerPair towers = jem::testing::small_towers();
    SamplerConfig c;
    c.steps = 0;
    c.seed = 4;
    const TextTokens text = towers.tokenize({"a red circle"});
    const SampleTrace t = generate(towers, text, c);
    EXPECT_EQ(t.final.tensor(), draw_initial({1, 3, 32, 32}, SamplerInit::Uniform01, 4).tensor());
    EXPECT_EQ(t.energy_trace.size(), 1u);
}

TEST(Sampler, TraceLengthAndClamp) {
    const TowerPair towers = jem::testing::small_towers();
    SamplerConfig c;
    c.steps = 7;
    c.step_size = 0.2;
    const SampleTrace t = generate(towers, towers.tokenize(jem::testing::cycle_captions(3)), c);
    EXPECT_EQ(t.energy_trace.size(), 8u);
    for (double v : t.final.tensor().values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Sampler, ConstantEnergyIsAFixedPoint) {
    const PixelObjective flat = [](const Tensor& x, Tensor* grad) {
        if (grad != nullptr) {
            *grad = Tensor::zeros_like(x);
        }
        return 1.0;
    };
    SamplerConfig c;
    c.steps = 10;
    c.init = SamplerInit::Provided;
    const ImageTensor x0 = jem::testing::random_images(2, 8, 8);
    EXPECT_EQ(optimize_pixels(flat, {}, x0, c).final.tensor(), x0.tensor());
}

TEST(Sampler, DegenerateAdaptiveStepIsSignLike) {
    Rng rng(3);
    const Tensor c = rng.uniform_tensor({1, 3, 4, 4});
    const ImageTensor x0 = jem::testing::random_images(1, 9, 4);
    const SamplerConfig cfg = degenerate(0.025);
    const Tensor out = optimize_pixels(quadratic(c), {}, x0, cfg).final.tensor();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double g = x0.tensor()[i] - c[i];
        EXPECT_NEAR(out[i], x0.tensor()[i] - 0.025 * g / (std::abs(g) + cfg.adaptive_eps), 1e-12);
    }
}

TEST(Sampler, PlainStepEqualsSgldDrift) {
    const TowerPair towers = jem::testing::small_towers();
    const Embedding text = encode_text(towers, towers.tokenize({"a blue square", "a red cross"}));
    const PixelObjective energy = mean_energy_objective(towers, text);
    SamplerConfig cfg = degenerate(0.01);
    cfg.adaptive = false;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const ImageTensor x0 = jem::testing::random_images(2, 60 + s);
        const Tensor out = optimize_pixels(energy, {}, x0, cfg).final.tensor();
        const SgldStep ref = sgld_step(energy, x0.tensor(), 2.0 * cfg.step_size, s);
        // The returned image is clamped; only compare where the drift stayed inside.
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (ref.deterministic[i] >= 0.0 && ref.deterministic[i] <= 1.0) {
                EXPECT_NEAR(out[i], ref.deterministic[i], 1e-6);
            }
        }
    }
}

TEST(Sampler, SgldQuadraticClosedForm) {
    Rng rng(5);
    const Tensor c = rng.normal_tensor({1, 8});
    const Tensor x = rng.normal_tensor({1, 8});
    const double alpha = 0.3;
    const SgldStep s = sgld_step_with_noise(quadratic(c), x, alpha, Tensor({1, 8}));
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_NEAR(s.next[i], x[i] - alpha / 2.0 * (x[i] - c[i]), 1e-15);
    }
    const SgldStep tiny = sgld_step(quadratic(c), x, 1e-14, 1);
    EXPECT_LT(max_abs_diff(tiny.next, x), 1e-6);
    EXPECT_THROW(sgld_step(quadratic(c), x, 0.0, 1), ConfigError);
}

TEST(Sampler, SgldNoiseVarianceIsAlpha) {
    const Tensor c({1, 100});
    const Tensor x({1, 100}, 0.5);
    const double alpha = 0.04;
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const SgldStep s = sgld_step(quadratic(c), x, alpha, seed);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = s.next[i] - s.deterministic[i];
            sum += d;
            sum_sq += d * d;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sum_sq / static_cast<double>(n) - mean * mean;
    EXPECT_NEAR(var / alpha, 1.0, 0.02);
}

TEST(Sampler, TaylorResidualOrders) {
    Rng rng(6);
    const Tensor x = rng.uniform_tensor({1, 16}) + Tensor({1, 16}, 0.5);
    const Tensor c = rng.normal_tensor({1, 16});
    AnalyticEnergy quad;
    quad.value = quadratic(c);
    quad.hessian_vector = [](const Tensor&, const Tensor& v) { return v; };
    EXPECT_LT(taylor_noise_check(quad, x, 0.1, 1).max_residual, 1e-14);

    const AnalyticEnergy q = quartic();
    EXPECT_EQ(taylor_noise_check(q, x, 0.0, 1).max_residual, 0.0);
    const double big = taylor_noise_check(q, x, 0.01, 2).max_residual;
    const double small = taylor_noise_check(q, x, 0.005, 2).max_residual;
    const double ratio = big / small;
    EXPECT_GE(ratio, 3.5);
    EXPECT_LE(ratio, 4.5);
}

TEST(Sampler, NoiseMakesSeedsDiverge) {
    const TowerPair towers = jem::testing::small_towers();
    const TextTokens text = towers.tokenize({"a red circle"});
    SamplerConfig c;
    c.steps = 5;
    c.noise_scale = 0.01;
    c.init = SamplerInit::Provided;
    const ImageTensor x0 = jem::testing::random_images(1, 1);
    c.seed = 1;
    const Tensor a = generate(towers, text, c, &x0).final.tensor();
    c.seed = 2;
    const Tensor b = generate(towers, text, c, &x0).final.tensor();
    EXPECT_GT(l2_norm((a - b).values()), 0.0);
    c.seed = 1;
    EXPECT_EQ(generate(towers, text, c, &x0).final.tensor(), a);
}

TEST(Sampler, GenerationDoesNotTouchTowers) {
    const TowerPair towers = jem::testing::small_towers();
    const TowerPair copy = towers;
    SamplerConfig c = SamplerConfig::training_default();
    c.steps = 3;
    c.mode = SamplerMode::Training;
    generate(towers, towers.tokenize(jem::testing::cycle_captions(4)), c);
    const auto a = towers.vision.net.parameters();
    const auto b = copy.vision.net.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(*a[i], *b[i]);
    }
    EXPECT_EQ(towers.text.table, copy.text.table);
}

TEST(Sampler, InvalidConfigsAreRejected) {
    SamplerConfig c;
    c.step_size = 0.0;
    EXPECT_FALSE(c.validate().empty());
    c = SamplerConfig{};
    c.momentum_beta1 = 1.0;
    EXPECT_FALSE(c.validate().empty());
    c = SamplerConfig{};
    c.noise_scale = -1.0;
    EXPECT_FALSE(c.validate().empty());
    EXPECT_TRUE(SamplerConfig{}.validate().empty());
}

TEST(Sampler, NonFiniteGradientAbortsWithStep) {
    const PixelObjective bad = [](const Tensor& x, Tensor* grad) {
        if (grad != nullptr) {
            *grad = Tensor(x.shape(), std::nan(""));
        }
        return 0.0;
    };
    SamplerConfig c;
    c.steps = 3;
    try {
        optimize_pixels(bad, {}, jem::testing::random_images(1, 1, 4), c);
        FAIL() << "expected a numeric error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
}

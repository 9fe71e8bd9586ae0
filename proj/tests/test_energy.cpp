#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "jem/energy.hpp"
#include "jem/error.hpp"
#include "support/test_util.hpp"

using namespace jem;

namespace {

Embedding random_embedding(std::size_t batch, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    return Embedding::normalize(rng.normal_tensor({batch, dim}));
}

Embedding unit_rows(std::vector<std::vector<double>> rows) {
    const std::size_t dim = rows.front().size();
    std::vector<double> flat;
    for (const auto& r : rows) {
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Embedding(Tensor({rows.size(), dim}, flat));
}

double log_sum_exp(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - m);
    }
    return m + std::log(s);
}

// Two-direction cross-entropy written out term by term.
double clip_loss_oracle(const Embedding& img, const Embedding& txt, double scale) {
    const std::size_t b = img.batch();
    std::vector<std::vector<double>> s(b, std::vector<double>(b));
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            s[i][j] = scale * dot(img.row(i), txt.row(j));
        }
    }
    double i2t = 0.0;
    double t2i = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> col(b);
        for (std::size_t j = 0; j < b; ++j) {
            col[j] = s[j][i];
        }
        i2t += log_sum_exp(s[i]) - s[i][i];
        t2i += log_sum_exp(col) - s[i][i];
    }
    return 0.5 * (i2t + t2i) / static_cast<double>(b);
}

}  // namespace

TEST(Energy, ExampleValues) {
    const Embedding a = unit_rows({{1.0, 0.0, 0.0}});
    const Embedding b = unit_rows({{0.6, 0.8, 0.0}});
    const Embedding c = unit_rows({{0.0, 0.0, 1.0}});
    EXPECT_NEAR(joint_energy(a, b)[0], -0.6, 1e-12);
    EXPECT_NEAR(joint_energy(a, a)[0], -1.0, 1e-12);
    EXPECT_NEAR(joint_energy(a, c)[0], 0.0, 1e-12);
}

TEST(Energy, BatchMismatchIsInputError) {
    EXPECT_THROW(joint_energy(random_embedding(2, 4, 1), random_embedding(3, 4, 2)), InputError);
    EXPECT_THROW(energy_matrix(random_embedding(2, 4, 1), random_embedding(3, 4, 2), random_embedding(2, 4, 3)),
                 InputError);
}

TEST(Energy, MatrixLayoutAndLoopOracle) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor pos = jem::testing::random_images(4, 31);
    const ImageTensor neg = jem::testing::random_images(4, 32);
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(4, 3));
    const EnergyMatrix m = build_energy_matrix(towers, pos, neg, text);
    ASSERT_EQ(m.texts(), 4u);
    ASSERT_EQ(m.columns(), 8u);
    ASSERT_EQ(m.positive_count, 4u);

    const Embedding te = encode_text(towers, text);
    for (std::size_t j = 0; j < 8; ++j) {
        const ImageTensor one = j < 4 ? pos.slice(j, j + 1) : neg.slice(j - 4, j - 3);
        const Embedding ie = encode_image(towers, one);
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_NEAR(m.values[k * 8 + j], dot(ie.row(0), te.row(k)), 1e-6);
        }
    }
    const std::vector<double> e = joint_energy(towers, pos, text);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(e[k], -m.values[k * 8 + k], 1e-6);
    }
    for (double v : m.values.values()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Energy, SingleTextShape) {
    const EnergyMatrix m = energy_matrix(random_embedding(1, 8, 1), random_embedding(1, 8, 2), random_embedding(1, 8, 3));
    EXPECT_EQ(m.values.shape(), (Shape{1, 2}));
}

TEST(Energy, IdenticalImagesGiveConstantRows) {
    const Embedding img = unit_rows({{0.0, 1.0}, {0.0, 1.0}});
    const EnergyMatrix m = energy_matrix(img, img, unit_rows({{1.0, 0.0}, {0.6, 0.8}}));
    for (std::size_t k = 0; k < 2; ++k) {
        for (std::size_t j = 1; j < 4; ++j) {
            EXPECT_EQ(m.values[k * 4 + j], m.values[k * 4]);
        }
    }
}

TEST(Energy, UniformRowsGiveLogTwoB) {
    const EnergyMatrix m{Tensor({4, 8}, 0.37), 4};
    EXPECT_NEAR(contrastive_energy_loss(m, 1.0), std::log(8.0), 1e-12);
    EXPECT_NEAR(contrastive_energy_loss(m, 1.0), 2.0794, 1e-4);
}

TEST(Energy, SinglePairClosedForm) {
    const EnergyMatrix m{Tensor({1, 2}, {0.9, 0.1}), 1};
    // ln(1 + e^-0.8)
    EXPECT_NEAR(contrastive_energy_loss(m, 1.0), 0.371101, 1e-6);
}

TEST(Energy, SaturatedDiagonalDrivesLossToZero) {
    Tensor v({3, 6}, -1.0);
    for (std::size_t k = 0; k < 3; ++k) {
        v[k * 6 + k] = 1.0;
    }
    EXPECT_LT(contrastive_energy_loss({v, 3}, 100.0), 1e-40);
    EXPECT_GT(contrastive_energy_loss({v, 3}, 1.0), contrastive_energy_loss({v, 3}, 10.0));
}

TEST(Energy, LossRejectsBadInputs) {
    EXPECT_THROW(contrastive_energy_loss({Tensor({1, 2}, 0.0), 1}, 0.0), InputError);
    EXPECT_THROW(contrastive_energy_loss({Tensor({1, 2}, {std::nan(""), 0.0}), 1}, 1.0), NumericError);
}

TEST(Energy, LossGradientMatchesFiniteDifferences) {
    Rng rng(4);
    Tensor v = rng.uniform_tensor({3, 6});
    Tensor grad;
    contrastive_energy_loss({v, 3}, 5.0, &grad);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double fd = jem::testing::central_difference(
            [](const Tensor& x) { return contrastive_energy_loss({x, 3}, 5.0); }, v, i, 1e-5);
        EXPECT_NEAR(grad[i], fd, 1e-7);
    }
}

TEST(Energy, LossIsNonNegativeAndBoundedBelowByZero) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        Tensor v = rng.uniform_tensor({4, 8});
        v *= 2.0;
        v += Tensor({4, 8}, -1.0);
        EXPECT_GE(contrastive_energy_loss({v, 4}, 10.0), 0.0);
    }
}

TEST(Energy, PermutingTextsWithTheirNegativesKeepsLoss) {
    const Embedding pos = random_embedding(5, 16, 1);
    const Embedding neg = random_embedding(5, 16, 2);
    const Embedding txt = random_embedding(5, 16, 3);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    auto permute = [&](const Embedding& e) {
        Tensor out = e.tensor();
        for (std::size_t i = 0; i < perm.size(); ++i) {
            std::copy(e.row(perm[i]).begin(), e.row(perm[i]).end(), out.row(i).begin());
        }
        return Embedding(out);
    };
    const double base = contrastive_energy_loss(energy_matrix(pos, neg, txt), 10.0);
    const double moved = contrastive_energy_loss(energy_matrix(permute(pos), permute(neg), permute(txt)), 10.0);
    EXPECT_NEAR(base, moved, 1e-12);
}

TEST(Energy, ClipLossMatchesOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Embedding img = random_embedding(4, 16, 10 + seed);
        const Embedding txt = random_embedding(4, 16, 20 + seed);
        EXPECT_NEAR(clip_contrastive_loss(img, txt, 10.0).value, clip_loss_oracle(img, txt, 10.0), 1e-6);
    }
}

TEST(Energy, ClipLossDegenerateCases) {
    EXPECT_EQ(clip_contrastive_loss(random_embedding(1, 8, 1), random_embedding(1, 8, 2), 10.0).value, 0.0);
    const Embedding id = unit_rows({{1.0, 0.0}, {0.0, 1.0}});
    EXPECT_LT(clip_contrastive_loss(id, id, 200.0).value, 1e-40);
    EXPECT_THROW(clip_contrastive_loss(random_embedding(2, 8, 1), random_embedding(3, 8, 2), 10.0), InputError);
}

TEST(Energy, ClipLossGradientMatchesFiniteDifferences) {
    const Embedding img = random_embedding(3, 6, 7);
    const Embedding txt = random_embedding(3, 6, 8);
    const ClipLoss loss = clip_contrastive_loss(img, txt, 4.0);
    // Perturbed rows leave the unit sphere, so differentiate the raw form.
    auto raw = [&](const Tensor& x, const Tensor& t) {
        const std::size_t b = 3;
        double total = 0.0;
        std::vector<std::vector<double>> s(b, std::vector<double>(b));
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < b; ++j) {
                s[i][j] = 4.0 * dot(x.row(i), t.row(j));
            }
        }
        for (std::size_t i = 0; i < b; ++i) {
            std::vector<double> col(b);
            for (std::size_t j = 0; j < b; ++j) {
                col[j] = s[j][i];
            }
            total += log_sum_exp(s[i]) + log_sum_exp(col) - 2.0 * s[i][i];
        }
        return 0.5 * total / static_cast<double>(b);
    };
    for (std::size_t i = 0; i < img.tensor().size(); ++i) {
        const double fd_img = jem::testing::central_difference(
            [&](const Tensor& x) { return raw(x, txt.tensor()); }, img.tensor(), i, 1e-6);
        const double fd_txt = jem::testing::central_difference(
            [&](const Tensor& t) { return raw(img.tensor(), t); }, txt.tensor(), i, 1e-6);
        EXPECT_NEAR(loss.grad_image[i], fd_img, 1e-7);
        EXPECT_NEAR(loss.grad_text[i], fd_txt, 1e-7);
    }
}

TEST(Energy, SmallParameterStepDoesNotIncreaseEnergyLoss) {
    TowerPair towers = jem::testing::small_towers(2);
    const ImageTensor pos = jem::testing::random_images(4, 41);
    const ImageTensor neg = jem::testing::random_images(4, 42);
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(4));
    const Embedding txt = encode_text(towers, text);

    auto loss_of = [&](const TowerPair& t) {
        return contrastive_energy_loss(build_energy_matrix(t, pos, neg, text), t.logit_scale);
    };
    const ImagePass pp = forward_image(towers, pos.tensor());
    const ImagePass np = forward_image(towers, neg.tensor());
    const EnergyLossGrads g = contrastive_energy_loss_grads(pp.embedding, np.embedding, txt, towers.logit_scale);
    EXPECT_NEAR(g.value, loss_of(towers), 1e-12);
    nn::ParamGrads grads = towers.vision.net.zero_grads();
    backward_image(towers, pp, g.grad_positive, &grads);
    backward_image(towers, np, g.grad_negative, &grads);

    const double before = loss_of(towers);
    auto params = towers.vision.net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->add_scaled(grads[i], -1e-4);
    }
    EXPECT_LE(loss_of(towers), before);
}

TEST(Energy, PixelObjectivesMatchTheirValues) {
    const TowerPair towers = jem::testing::small_towers();
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(3));
    const Embedding txt = encode_text(towers, text);
    const ImageTensor x = jem::testing::random_images(3, 51);
    const PixelObjective mean_e = mean_energy_objective(towers, txt);
    const PixelObjective clip = clip_loss_objective(towers, txt);
    const std::vector<double> e = joint_energy(towers, x, text);
    EXPECT_NEAR(mean_e(x.tensor(), nullptr), std::accumulate(e.begin(), e.end(), 0.0) / 3.0, 1e-12);
    EXPECT_NEAR(clip(x.tensor(), nullptr), clip_contrastive_loss(encode_image(towers, x), txt, towers.logit_scale).value,
                1e-12);

    Tensor grad;
    mean_e(x.tensor(), &grad);
    Rng rng(3);
    for (std::size_t t = 0; t < 10; ++t) {
        const std::size_t i = rng.below(x.tensor().size());
        const double fd = jem::testing::central_difference(
            [&](const Tensor& p) { return mean_e(p, nullptr); }, x.tensor(), i);
        EXPECT_LT(jem::testing::relative_error(grad[i], fd, 1e-4), 1e-3);
    }
}

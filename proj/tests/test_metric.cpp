#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "jem/error.hpp"
#include "jem/metric.hpp"
#include "support/test_util.hpp"

using namespace jem;

namespace {

std::vector<std::string> data_lines(const std::string& csv) {
    std::istringstream in(csv);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '#') {
            out.push_back(line);
        }
    }
    return out;
}

}  // namespace

TEST(Metric, ScoreIsPairwiseCosine) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor images = jem::testing::random_images(5, 2);
    const auto captions = jem::testing::cycle_captions(5, 3);
    const ScoreReport r = score(towers, images, towers.tokenize(captions));
    ASSERT_EQ(r.scores.size(), 5u);
    const Embedding ei = encode_image(towers, images);
    const Embedding et = encode_text(towers, towers.tokenize(captions));
    double mean = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < ei.dim(); ++j) {
            d += ei.row(k)[j] * et.row(k)[j];
        }
        EXPECT_NEAR(r.scores[k], d, 1e-12);
        EXPECT_LE(std::abs(r.scores[k]), 1.0 + 1e-12);
        mean += d / 5.0;
    }
    EXPECT_NEAR(r.mean, mean, 1e-12);
    EXPECT_THROW(score(towers, images, towers.tokenize(jem::testing::cycle_captions(4))), InputError);
}

TEST(Metric, ScoreFollowsPairPermutations) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor images = jem::testing::random_images(4, 3);
    const auto captions = jem::testing::cycle_captions(4, 1);
    const ScoreReport r = score(towers, images, towers.tokenize(captions));
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor shuffled = images.tensor();
    const std::size_t per = images.tensor().row_size();
    std::vector<std::string> caps;
    for (std::size_t k = 0; k < 4; ++k) {
        for (std::size_t j = 0; j < per; ++j) {
            shuffled[k * per + j] = images.tensor()[perm[k] * per + j];
        }
        caps.push_back(captions[perm[k]]);
    }
    const ScoreReport p = score(towers, ImageTensor(shuffled), towers.tokenize(caps));
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(p.scores[k], r.scores[perm[k]], 1e-12);
    }
}

TEST(Metric, AttackWithZeroBudgetIsClean) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor images = jem::testing::random_images(3, 4);
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(3));
    AdvBudget none = AdvBudget::metric_default();
    none.epsilon = 0.0;
    EXPECT_EQ(attacked_score(towers, images, text, AttackDirection::Decrease, none).scores,
              score(towers, images, text).scores);
}

TEST(Metric, AttackMovesTheScoreItsWay) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor images = jem::testing::random_images(3, 5);
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(3));
    const double clean = score(towers, images, text).mean;
    const ScoreReport down = attacked_score(towers, images, text, AttackDirection::Decrease);
    const ScoreReport up = attacked_score(towers, images, text, AttackDirection::Increase);
    EXPECT_LT(down.mean, clean);
    EXPECT_GT(up.mean, clean);
    EXPECT_EQ(down.provenance["attack"]["direction"], "decrease");
    EXPECT_EQ(parse_direction("increase"), AttackDirection::Increase);
    EXPECT_THROW(parse_direction("sideways"), ConfigError);
}

TEST(Metric, BlendAnchorsAndEndpoints) {
    const TowerPair towers = jem::testing::small_towers();
    const ImageTensor images = jem::testing::random_images(3, 6);
    const TextTokens text = towers.tokenize(jem::testing::cycle_captions(3));
    const auto grid = parse_lambda_grid("0:1:0.05");
    const BlendCurve c = blend_curve(towers, images, text, grid, 7);
    ASSERT_EQ(c.raw_scores.size(), 21u);
    EXPECT_EQ(c.normalized_scores.front(), 1.0);
    EXPECT_NEAR(c.raw_scores.back(), score(towers, images, text).mean, 1e-12);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_NEAR(c.normalized_scores[i], c.raw_scores[i] / c.raw_scores[0], 1e-12);
    }
    // Same seed, same noise: a sub-grid reproduces the matching rows.
    const BlendCurve sub = blend_curve(towers, images, text, {0.0, 0.5}, 7);
    EXPECT_EQ(sub.raw_scores[0], c.raw_scores[0]);
    EXPECT_NEAR(sub.raw_scores[1], c.raw_scores[10], 1e-12);
    EXPECT_THROW(blend_curve(towers, images, text, {0.5, 1.0}, 7), ConfigError);
    EXPECT_THROW(blend_curve(towers, images, text, {0.0, 1.5}, 7), ConfigError);
}

TEST(Metric, LambdaGridParsing) {
    const auto g = parse_lambda_grid("0:1:0.05");
    ASSERT_EQ(g.size(), 21u);
    EXPECT_EQ(g.front(), 0.0);
    EXPECT_EQ(g.back(), 1.0);
    EXPECT_NEAR(g[7], 0.35, 1e-12);
    EXPECT_EQ(parse_lambda_grid("0,0.5,1"), (std::vector<double>{0.0, 0.5, 1.0}));
    EXPECT_THROW(parse_lambda_grid("0:1:0"), ConfigError);
    EXPECT_THROW(parse_lambda_grid("a,b"), ConfigError);
    EXPECT_THROW(parse_lambda_grid(""), ConfigError);
}

TEST(Metric, SpearmanAgainstHandComputedValues) {
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
    // ranks x = 1..5, y = 2,1,4,3,5: sum d^2 = 4, rho = 1 - 6*4/(5*24) = 0.8
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {20, 10, 40, 30, 50}), 0.8, 1e-12);
    // ties: y ranks 1.5,1.5,3,4 -> Pearson of ranks = 0.9486832980505138
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {5, 5, 6, 7}), 0.9486832980505138, 1e-12);
    EXPECT_EQ(spearman({1, 2, 3}, {1, 1, 1}), 0.0);
    EXPECT_THROW(spearman({1}, {1}), InputError);
}

TEST(Metric, CsvLayouts) {
    ScoreReport r;
    r.scores = {0.5, -0.25};
    r.mean = 0.125;
    r.provenance["checkpoint"] = "abc";
    std::ostringstream s;
    write_score_csv(s, r, {"a.png", "b.png"}, {"a red circle", "say \"hi\", ok"});
    const auto rows = data_lines(s.str());
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], "index,image,caption,score");
    EXPECT_EQ(rows[1], "0,a.png,a red circle,0.5");
    EXPECT_EQ(rows[2], "1,b.png,\"say \"\"hi\"\", ok\",-0.25");
    EXPECT_NE(s.str().find("# "), std::string::npos);
    EXPECT_NE(s.str().find("\"checkpoint\": \"abc\""), std::string::npos);

    BlendCurve c;
    c.lambdas = {0.0, 1.0};
    c.raw_scores = {0.2, 0.4};
    c.normalized_scores = {1.0, 2.0};
    c.seed = 3;
    std::ostringstream b;
    write_blend_csv(b, c, {{"command", "blend"}});
    const auto brows = data_lines(b.str());
    ASSERT_EQ(brows.size(), 3u);
    EXPECT_EQ(brows[0], "lambda,raw_score,normalized_score");
    EXPECT_EQ(brows[2], "1,0.4,2");
    EXPECT_NE(b.str().find("\"seed\": 3"), std::string::npos);
}

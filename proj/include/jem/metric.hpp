#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "jem/adversarial.hpp"

namespace jem {

struct ScoreReport {
    std::vector<double> scores;  // cos(f_I(image_k), f_T(text_k))
    double mean = 0.0;
    nlohmann::json provenance = nlohmann::json::object();
};

ScoreReport score(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts);

enum class AttackDirection { Increase, Decrease };

std::string to_string(AttackDirection d);
AttackDirection parse_direction(const std::string& text);

// PGD on the mean score itself (ascent for Increase, descent for Decrease),
// then the score of the perturbed images.
ScoreReport attacked_score(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                           AttackDirection direction, const AdvBudget& budget = AdvBudget::metric_default());

struct BlendCurve {
    std::vector<double> lambdas;
    std::vector<double> raw_scores;         // batch-mean score per lambda
    std::vector<double> normalized_scores;  // raw / raw at lambda = 0
    std::vector<std::vector<double>> per_image;  // [lambda][image]
    std::uint64_t seed = 0;
};

// Scores lambda * x + (1 - lambda) * u with u ~ U[0,1] drawn once per image
// and shared across the lambda grid.
BlendCurve blend_curve(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                       const std::vector<double>& lambdas, std::uint64_t seed);

// "start:stop:step" (inclusive stop within half a step) or a comma list.
std::vector<double> parse_lambda_grid(const std::string& text);

// Rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// CSV reports preceded by `# `-prefixed JSON provenance lines.
void write_score_csv(std::ostream& out, const ScoreReport& report, const std::vector<std::string>& images,
                     const std::vector<std::string>& captions);
void write_blend_csv(std::ostream& out, const BlendCurve& curve, const nlohmann::json& provenance);

}  // namespace jem

#include "jem/metric.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "jem/error.hpp"
#include "jem/rng.hpp"

namespace jem {
namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

void write_header(std::ostream& out, const nlohmann::json& provenance) {
    std::istringstream lines(provenance.dump(2));
    std::string line;
    while (std::getline(lines, line)) {
        out << "# " << line << '\n';
    }
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string q = "\"";
    for (char c : s) {
        q += c;
        if (c == '"') {
            q += '"';
        }
    }
    return q + "\"";
}

}  // namespace

ScoreReport score(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts) {
    if (images.batch() != texts.batch()) {
        throw InputError("score: image/text batch mismatch");
    }
    ScoreReport report;
    for (double e : joint_energy(towers, images, texts)) {
        report.scores.push_back(-e);
    }
    report.mean = mean_of(report.scores);
    return report;
}

std::string to_string(AttackDirection d) { return d == AttackDirection::Increase ? "increase" : "decrease"; }

AttackDirection parse_direction(const std::string& text) {
    if (text == "increase") {
        return AttackDirection::Increase;
    }
    if (text == "decrease") {
        return AttackDirection::Decrease;
    }
    throw ConfigError("unknown attack direction '" + text + "' (expected increase or decrease)");
}

ScoreReport attacked_score(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                           AttackDirection direction, const AdvBudget& budget) {
    if (images.batch() != texts.batch()) {
        throw InputError("attacked_score: image/text batch mismatch");
    }
    if (const auto problems = budget.validate(); !problems.empty()) {
        throw ConfigError(problems.front());
    }
    const Embedding t = encode_text(towers, texts);
    const double sign = direction == AttackDirection::Increase ? 1.0 : -1.0;
    const PixelObjective objective = [&](const Tensor& pixels, Tensor* grad) {
        const ImagePass pass = forward_image(towers, pixels);
        double value = 0.0;
        for (std::size_t k = 0; k < t.batch(); ++k) {
            value += dot(pass.embedding.row(k), t.row(k));
        }
        const double b = static_cast<double>(t.batch());
        if (grad != nullptr) {
            Tensor d = t.tensor();
            d *= sign / b;
            *grad = backward_image(towers, pass, d, nullptr);
        }
        return sign * value / b;
    };
    const Tensor perturbed = pgd_ascent(objective, images.tensor(), budget);
    ScoreReport report = score(towers, ImageTensor(perturbed), texts);
    report.provenance["attack"] = {{"direction", to_string(direction)},
                                   {"norm", to_string(budget.norm)},
                                   {"epsilon", budget.epsilon},
                                   {"alpha1", budget.alpha1},
                                   {"steps", budget.t_adv}};
    return report;
}

BlendCurve blend_curve(const TowerPair& towers, const ImageTensor& images, const TextTokens& texts,
                       const std::vector<double>& lambdas, std::uint64_t seed) {
    if (images.batch() != texts.batch()) {
        throw InputError("blend_curve: image/text batch mismatch");
    }
    if (lambdas.empty()) {
        throw ConfigError("lambda grid is empty");
    }
    std::size_t anchor = lambdas.size();
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        if (!(lambdas[i] >= 0.0 && lambdas[i] <= 1.0)) {
            throw ConfigError("lambda values must lie in [0, 1]");
        }
        if (lambdas[i] == 0.0 && anchor == lambdas.size()) {
            anchor = i;
        }
    }
    if (anchor == lambdas.size()) {
        throw ConfigError("lambda grid must include 0");
    }
    Rng rng(derive_seed(seed, "blend-noise"));
    const Tensor noise = rng.uniform_tensor(images.shape());
    const Embedding t = encode_text(towers, texts);
    BlendCurve curve;
    curve.lambdas = lambdas;
    curve.seed = seed;
    for (double lambda : lambdas) {
        Tensor mix = images.tensor();
        for (std::size_t k = 0; k < mix.size(); ++k) {
            mix[k] = lambda == 1.0 ? mix[k] : lambda * mix[k] + (1.0 - lambda) * noise[k];
        }
        std::vector<double> s;
        for (double e : joint_energy(encode_image(towers, ImageTensor::clamped(std::move(mix))), t)) {
            s.push_back(-e);
        }
        curve.raw_scores.push_back(mean_of(s));
        curve.per_image.push_back(std::move(s));
    }
    const double base = curve.raw_scores[anchor];
    for (double r : curve.raw_scores) {
        curve.normalized_scores.push_back(r / base);
    }
    curve.normalized_scores[anchor] = 1.0;
    return curve;
}

std::vector<double> parse_lambda_grid(const std::string& text) {
    auto number = [&](const std::string& s) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != s.size()) {
            throw ConfigError("bad lambda value '" + s + "'");
        }
        return v;
    };
    std::vector<double> out;
    if (std::count(text.begin(), text.end(), ':') == 2) {
        const auto a = text.find(':');
        const auto b = text.find(':', a + 1);
        const double start = number(text.substr(0, a));
        const double stop = number(text.substr(a + 1, b - a - 1));
        const double step = number(text.substr(b + 1));
        if (!(step > 0.0) || stop < start) {
            throw ConfigError("lambda range needs step > 0 and stop >= start");
        }
        const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 0.5));
        for (std::size_t i = 0; i <= n; ++i) {
            out.push_back(std::min(stop, start + static_cast<double>(i) * step));
        }
        return out;
    }
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        out.push_back(number(item));
    }
    if (out.empty()) {
        throw ConfigError("empty lambda grid");
    }
    return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InputError("spearman needs two equal-length series of at least 2 values");
    }
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double mx = mean_of(rx);
    const double my = mean_of(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

void write_score_csv(std::ostream& out, const ScoreReport& report, const std::vector<std::string>& images,
                     const std::vector<std::string>& captions) {
    nlohmann::json prov = report.provenance;
    prov["mean"] = report.mean;
    prov["count"] = report.scores.size();
    write_header(out, prov);
    out << "index,image,caption,score\n" << std::setprecision(10);
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        out << i << ',' << csv_field(i < images.size() ? images[i] : "") << ','
            << csv_field(i < captions.size() ? captions[i] : "") << ',' << report.scores[i] << '\n';
    }
}

void write_blend_csv(std::ostream& out, const BlendCurve& curve, const nlohmann::json& provenance) {
    nlohmann::json prov = provenance;
    prov["seed"] = curve.seed;
    write_header(out, prov);
    out << "lambda,raw_score,normalized_score\n" << std::setprecision(10);
    for (std::size_t i = 0; i < curve.lambdas.size(); ++i) {
        out << curve.lambdas[i] << ',' << curve.raw_scores[i] << ',' << curve.normalized_scores[i] << '\n';
    }
}

}  // namespace jem

#include <gtest/gtest.h>

#include "jem/adversarial.hpp"
#include "jem/sampler.hpp"
#include "support/oracle_classifier.hpp"
#include "support/zoo.hpp"

using namespace jem;

namespace {

const jem::testing::Zoo& zoo() {
    static const jem::testing::Zoo z = [] {
        jem::testing::Zoo out{JEM_ZOO_DIR};
        jem::testing::require_zoo(out);
        return out;
    }();
    return z;
}

const TowerPair& full() {
    static const TowerPair t = load_checkpoint(zoo().towers("full"));
    return t;
}

const PairedDataset& held() {
    static const PairedDataset d = PairedDataset::load(zoo().held_data());
    return d;
}

// Mean over held-out batches of 16 of ClipLoss(adversarial) - ClipLoss(clean).
double adversarial_gap(const TowerPair& towers) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + 16 <= held().size(); start += 16) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < start + 16; ++i) {
            idx.push_back(i);
        }
        const Batch b = held().batch(idx);
        const TextTokens text = towers.tokenize(b.captions);
        const double adv = adversarial_loss(towers, b.images, text, AdvBudget::training_default(), start).value;
        const double clean = clip_loss_with_param_grads(towers, b.images.tensor(), encode_text(towers, text)).value;
        total += adv - clean;
        ++count;
    }
    return total / static_cast<double>(count);
}

}  // namespace

TEST(Trained, DistinctCaptionsHaveDistinctEmbeddings) {
    const Embedding e = encode_text(full(), full().tokenize({"a red circle", "a blue square"}));
    EXPECT_LT(dot(e.row(0), e.row(1)), 1.0 - 1e-4);
}

TEST(Trained, ClassifierAgreesWithDatasetCaptions) {
    const auto clf = jem::testing::ShapeClassifier::load(zoo().classifier());
    const DatasetSpec spec = DatasetSpec::shapes_default();
    for (const auto& path : {zoo().held_data(), zoo().train_data()}) {
        const PairedDataset ds = PairedDataset::load(path);
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        const Batch b = ds.batch(idx);
        EXPECT_GE(jem::testing::agreement(clf, b.images.tensor(), jem::testing::caption_labels(spec, b.captions)),
                  0.99)
            << path;
    }
}

TEST(Trained, InferenceSamplerDescends) {
    const DatasetSpec spec = DatasetSpec::shapes_default();
    std::size_t descended = 0;
    for (std::size_t i = 0; i < 40; ++i) {
        SamplerConfig c = SamplerConfig::inference_default();
        c.seed = derive_seed(77, "descent", i);
        const std::size_t cls = (i * 5) % spec.classes();
        const SampleTrace t = generate(
            full(), full().tokenize({spec.caption(cls / spec.shapes.size(), cls % spec.shapes.size())}), c);
        descended += t.energy_trace.back() < t.energy_trace.front() ? 1 : 0;

        std::vector<double> avg;
        for (std::size_t s = 0; s + 10 <= t.energy_trace.size(); ++s) {
            double m = 0.0;
            for (std::size_t k = s; k < s + 10; ++k) {
                m += t.energy_trace[k] / 10.0;
            }
            avg.push_back(m);
        }
        for (std::size_t s = 1; s < avg.size(); ++s) {
            EXPECT_LE(avg[s], avg[s - 1]) << "seed " << i << " window " << s;
        }
    }
    EXPECT_GE(descended, 38u);
}

TEST(Trained, AdversarialTrainingShrinksTheAdversarialGap) {
    const double trained = adversarial_gap(full());
    const double vanilla = adversarial_gap(load_checkpoint(zoo().towers("vanilla")));
    EXPECT_LT(trained, vanilla);
}

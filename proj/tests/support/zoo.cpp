#include "support/zoo.hpp"

#include <chrono>
#include <fstream>

#include "jem/config.hpp"
#include "jem/error.hpp"
#include "jem/guidance.hpp"
#include "support/oracle_classifier.hpp"

namespace jem::testing {
namespace fs = std::filesystem;

namespace {

// Each artifact is produced under a temporary name and renamed when done, so
// an interrupted build never leaves something that looks finished.
template <class F>
void produce_dir(const fs::path& target, std::ostream& log, const std::string& what, F&& make) {
    if (fs::exists(target)) {
        log << "zoo: " << what << " present\n";
        return;
    }
    const fs::path tmp = target.string() + ".partial";
    fs::remove_all(tmp);
    fs::create_directories(tmp.parent_path());
    log << "zoo: building " << what << std::endl;
    make(tmp);
    fs::rename(tmp, target);
}

}  // namespace

TrainConfig zoo_train_config(const fs::path& toy_cfg, const std::string& variant) {
    KeyValueConfig kv = KeyValueConfig::load(toy_cfg);
    if (variant == "adv_only" || variant == "vanilla") {
        kv.set("train.ablation", "adv_only");
    } else if (variant == "energy_only") {
        kv.set("train.ablation", "energy_only");
    } else if (variant != "full") {
        throw ConfigError("unknown zoo variant '" + variant + "'");
    }
    if (variant == "vanilla") {
        kv.set("adv.eps", "0");
    }
    TrainConfig config;
    std::vector<std::string> problems;
    config.apply(kv, problems);
    for (const auto& key : kv.unused()) {
        problems.push_back("unknown key " + key);
    }
    if (!problems.empty()) {
        throw ConfigError(toy_cfg.string() + ": " + problems.front());
    }
    return config;
}

void build_zoo(const Zoo& zoo, const fs::path& toy_cfg, std::ostream& log) {
    const DatasetSpec base = DatasetSpec::shapes_default();
    produce_dir(zoo.train_data(), log, "training data", [&](const fs::path& dir) {
        DatasetSpec spec = base;
        spec.count = 640;
        spec.seed = 1;
        make_synthetic_dataset(spec, dir);
    });
    produce_dir(zoo.held_data(), log, "held-out data", [&](const fs::path& dir) {
        DatasetSpec spec = base;
        spec.count = 64;
        spec.seed = 99;
        make_synthetic_dataset(spec, dir);
    });
    const PairedDataset train = PairedDataset::load(zoo.train_data());

    for (const char* variant : kZooVariants) {
        produce_dir(zoo.run_dir(variant), log, std::string("towers ") + variant, [&](const fs::path& dir) {
            TrainConfig config = zoo_train_config(toy_cfg, variant);
            FitOptions options;
            options.out_dir = dir;
            options.on_step = [&](const StepMetrics& m) {
                if (m.step % 250 == 0) {
                    log << "  " << variant << " step " << m.step << " loss " << m.loss << std::endl;
                }
            };
            const auto start = std::chrono::steady_clock::now();
            fit(config, train, options);
            const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
            std::ofstream(dir / "train_seconds.txt") << took.count() << '\n';
        });
    }

    if (!fs::exists(zoo.denoiser())) {
        log << "zoo: building denoiser" << std::endl;
        DenoiserTrainConfig config;
        const ToyDenoiser model = train_toy_denoiser(config, train, [&](std::size_t step, double loss) {
            if (step % 500 == 0) {
                log << "  denoiser step " << step << " loss " << loss << std::endl;
            }
        });
        model.save(zoo.denoiser());
    }
    if (!fs::exists(zoo.classifier())) {
        log << "zoo: building classifier" << std::endl;
        train_shape_classifier(base, {}).save(zoo.classifier());
    }
}

void require_zoo(const Zoo& zoo) {
    std::vector<fs::path> needed{zoo.train_data() / "manifest.tsv", zoo.held_data() / "manifest.tsv",
                                 zoo.denoiser(), zoo.classifier()};
    for (const char* variant : kZooVariants) {
        needed.push_back(zoo.towers(variant));
    }
    for (const auto& p : needed) {
        if (!fs::exists(p)) {
            throw LoadError("model zoo incomplete, missing " + p.string() + " (run jem_zoo first)");
        }
    }
}

}  // namespace jem::testing

#pragma once

#include <filesystem>
#include <ostream>
#include <string>

#include "jem/trainer.hpp"

namespace jem::testing {

// Trained artifacts shared by the slow tests and the acceptance run:
//   data/train, data/held        synthetic datasets
//   models/<variant>/final.towers  full, adv_only, energy_only, vanilla
//   models/<variant>/train_seconds.txt
//   denoiser.bin, classifier.bin
struct Zoo {
    std::filesystem::path root;

    std::filesystem::path train_data() const { return root / "data" / "train"; }
    std::filesystem::path held_data() const { return root / "data" / "held"; }
    std::filesystem::path run_dir(const std::string& variant) const { return root / "models" / variant; }
    std::filesystem::path towers(const std::string& variant) const { return run_dir(variant) / "final.towers"; }
    std::filesystem::path denoiser() const { return root / "denoiser.bin"; }
    std::filesystem::path classifier() const { return root / "classifier.bin"; }
};

inline constexpr const char* kZooVariants[] = {"full", "adv_only", "energy_only", "vanilla"};

// Training config of a variant, read from configs/toy.cfg.
TrainConfig zoo_train_config(const std::filesystem::path& toy_cfg, const std::string& variant);

// Builds whatever is missing; finished artifacts are left alone.
void build_zoo(const Zoo& zoo, const std::filesystem::path& toy_cfg, std::ostream& log);

// Throws LoadError naming the first missing artifact.
void require_zoo(const Zoo& zoo);

}  // namespace jem::testing

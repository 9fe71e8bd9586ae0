#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jem/adversarial.hpp"
#include "jem/config.hpp"
#include "jem/dataset.hpp"
#include "jem/optim.hpp"
#include "jem/sampler.hpp"

namespace jem {

enum class Ablation { Full, AdvOnly, EnergyOnly };

std::string to_string(Ablation a);
// Accepts "full", "adv_only"/"adv-only", "energy_only"/"energy-only".
Ablation parse_ablation(const std::string& text);

struct TrainConfig {
    double gamma = 0.1;
    std::size_t batch_disc = 16;
    std::size_t batch_gen = 8;
    std::size_t total_steps = 2000;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::string schedule = "cosine";
    std::size_t warmup_steps = 200;
    double grad_clip = 1.0;  // global-norm clip; <= 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    AdvBudget adv = AdvBudget::training_default();
    SamplerConfig neg_sampler = SamplerConfig::training_default();
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::Full;
    std::size_t checkpoint_every = 500;  // 0: only the final checkpoint
    // Architecture of freshly initialized towers. An empty vocabulary is
    // filled from the dataset captions.
    TowerConfig towers;

    // Every problem found, empty when valid.
    std::vector<std::string> validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    // Applies `section.key` entries; unknown keys and malformed values are
    // reported as problems.
    void apply(const KeyValueConfig& kv, std::vector<std::string>& problems);
};

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double l_adv = 0.0;
    double l_jem = 0.0;
    double pos_energy = 0.0;  // mean E over real pairs of the batch
    double neg_energy = 0.0;  // mean E(negative_k, text_k); NaN without negatives
    double grad_norm = 0.0;   // before clipping
};

struct TrainState {
    TowerPair towers;
    AdamW optimizer;
    std::size_t step = 0;  // number of completed steps
    std::uint64_t seed = 0;
    std::optional<StepMetrics> last;
};

// Instrumentation for ablation separability.
struct BranchCounters {
    std::size_t adversarial = 0;
    std::size_t negative_generation = 0;
};

TrainState init_train_state(const TrainConfig& config, const TowerConfig& towers);

// One optimizer step on vision-tower parameters:
//   L = L_adv + gamma * L_JEM
// with L_adv the ClipLoss on PGD images of the full batch and L_JEM the
// contrastive energy loss of the first batch_gen pairs against freshly
// generated negatives. Ablations drop a term and skip computing it.
StepMetrics train_step(TrainState& state, const Batch& batch, const TrainConfig& config,
                       BranchCounters* counters = nullptr);

// Sidecar with optimizer moments and schedule position. The towers go to a
// separate checkpoint written with save_checkpoint.
void save_train_state(const TrainState& state, const TrainConfig& config, const std::filesystem::path& towers_path,
                      const std::filesystem::path& state_path);
TrainState load_train_state(const std::filesystem::path& towers_path, const std::filesystem::path& state_path,
                            TrainConfig* config_out = nullptr);
std::filesystem::path state_path_for(const std::filesystem::path& towers_path);

struct FitOptions {
    std::filesystem::path out_dir;  // empty: nothing is written
    std::optional<std::filesystem::path> resume_from;  // towers checkpoint with a sidecar
    // Stop after this many completed steps (the schedule still spans
    // total_steps). Used to cut a run short and resume it later.
    std::optional<std::size_t> stop_after;
    std::function<void(const StepMetrics&)> on_step;
    BranchCounters* counters = nullptr;
};

struct FitResult {
    TrainState state;
    std::vector<StepMetrics> log;
    std::filesystem::path final_checkpoint;
};

// Runs the training loop. Data order comes from (config.seed, step); every
// per-step random draw is derived from (config.seed, step), so a resumed run
// reproduces the uninterrupted one bit-exactly.
FitResult fit(const TrainConfig& config, const PairedDataset& dataset, const FitOptions& options = {});

// Vocabulary taken from the caption words (sorted, unique).
std::vector<std::string> caption_vocabulary(const PairedDataset& dataset);

struct EnergyGap {
    double pos_energy = 0.0;
    double neg_energy = 0.0;
    double gap() const { return pos_energy - neg_energy; }
};

// Mean real-pair energy minus mean energy of fresh negatives generated with
// `sampler` (training mode) against the same captions, over `pairs` records
// in chunks of `chunk`.
EnergyGap measure_energy_gap(const TowerPair& towers, const PairedDataset& dataset, const SamplerConfig& sampler,
                             std::size_t pairs, std::size_t chunk, std::uint64_t seed);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepMetrics& m);

}  // namespace jem

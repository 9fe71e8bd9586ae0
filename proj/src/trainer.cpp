#include "jem/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "jem/container.hpp"
#include "jem/error.hpp"
#include "jem/rng.hpp"

namespace jem {
namespace {

constexpr int kStateVersion = 1;

std::string sampler_init_name(SamplerInit init) { return init == SamplerInit::Uniform01 ? "uniform01" : "provided"; }

SamplerInit parse_sampler_init(const std::string& s) {
    if (s == "uniform01") {
        return SamplerInit::Uniform01;
    }
    if (s == "provided") {
        return SamplerInit::Provided;
    }
    throw ConfigError("unknown sampler init '" + s + "'");
}

nlohmann::json sampler_json(const SamplerConfig& c) {
    return {{"steps", c.steps},
            {"step_size", c.step_size},
            {"momentum_beta1", c.momentum_beta1},
            {"adaptive_beta2", c.adaptive_beta2},
            {"adaptive", c.adaptive},
            {"adaptive_eps", c.adaptive_eps},
            {"weight_decay", c.weight_decay},
            {"noise_scale", c.noise_scale},
            {"clamp", c.clamp},
            {"init", sampler_init_name(c.init)},
            {"mode", c.mode == SamplerMode::Training ? "training" : "inference"},
            {"seed", c.seed}};
}

SamplerConfig sampler_from_json(const nlohmann::json& j) {
    SamplerConfig c;
    c.steps = j.at("steps");
    c.step_size = j.at("step_size");
    c.momentum_beta1 = j.at("momentum_beta1");
    c.adaptive_beta2 = j.at("adaptive_beta2");
    c.adaptive = j.at("adaptive");
    c.adaptive_eps = j.at("adaptive_eps");
    c.weight_decay = j.at("weight_decay");
    c.noise_scale = j.at("noise_scale");
    c.clamp = j.at("clamp");
    c.init = parse_sampler_init(j.at("init"));
    c.mode = j.at("mode") == "training" ? SamplerMode::Training : SamplerMode::Inference;
    c.seed = j.at("seed");
    return c;
}

nlohmann::json budget_json(const AdvBudget& b) {
    return {{"norm", to_string(b.norm)}, {"epsilon", b.epsilon}, {"alpha1", b.alpha1}, {"t_adv", b.t_adv}};
}

AdvBudget budget_from_json(const nlohmann::json& j) {
    return {parse_norm(j.at("norm")), j.at("epsilon"), j.at("alpha1"), j.at("t_adv")};
}

nlohmann::json tower_config_json(const TowerConfig& c) {
    return {{"resolution", c.resolution}, {"embed_dim", c.embed_dim}, {"channels", c.channels},
            {"vocabulary", c.vocabulary}, {"max_len", c.max_len},     {"seed", c.seed},
            {"logit_scale", c.logit_scale}};
}

TowerConfig tower_config_from_json(const nlohmann::json& j) {
    TowerConfig c;
    c.resolution = j.at("resolution");
    c.embed_dim = j.at("embed_dim");
    c.channels = j.at("channels").get<std::vector<std::size_t>>();
    c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    c.max_len = j.at("max_len");
    c.seed = j.at("seed");
    c.logit_scale = j.at("logit_scale");
    return c;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

// Generates one negative per caption by descending the batch ClipLoss from
// uniform noise.
ImageTensor generate_negatives(const TowerPair& towers, const Embedding& texts, const SamplerConfig& base,
                               std::uint64_t seed) {
    SamplerConfig cfg = base;
    cfg.seed = seed;
    cfg.init = SamplerInit::Uniform01;
    const std::size_t r = towers.vision.resolution;
    ImageTensor initial = draw_initial({texts.batch(), 3, r, r}, cfg.init, cfg.seed);
    const PixelObjective objective = cfg.mode == SamplerMode::Training ? clip_loss_objective(towers, texts)
                                                                       : mean_energy_objective(towers, texts);
    return optimize_pixels(objective, {}, std::move(initial), cfg).final;
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return s.str();
}

}  // namespace

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::Full:
            return "full";
        case Ablation::AdvOnly:
            return "adv_only";
        case Ablation::EnergyOnly:
            return "energy_only";
    }
    return "full";
}

Ablation parse_ablation(const std::string& text) {
    std::string s = text;
    std::replace(s.begin(), s.end(), '-', '_');
    if (s == "full") {
        return Ablation::Full;
    }
    if (s == "adv_only") {
        return Ablation::AdvOnly;
    }
    if (s == "energy_only") {
        return Ablation::EnergyOnly;
    }
    throw ConfigError("unknown ablation '" + text + "' (expected full, adv-only or energy-only)");
}

std::vector<std::string> TrainConfig::validate() const {
    std::vector<std::string> p;
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        p.emplace_back("gamma must be >= 0");
    }
    if (batch_disc < 1) {
        p.emplace_back("batch_disc must be >= 1");
    }
    if (batch_gen < 1) {
        p.emplace_back("batch_gen must be >= 1");
    }
    if (batch_gen > batch_disc) {
        p.emplace_back("batch_gen must not exceed batch_disc");
    }
    if (warmup_steps > total_steps) {
        p.emplace_back("warmup_steps must not exceed total_steps");
    }
    if (!(lr > 0.0)) {
        p.emplace_back("lr must be > 0");
    }
    if (!(weight_decay >= 0.0)) {
        p.emplace_back("weight_decay must be >= 0");
    }
    if (schedule != "cosine") {
        p.emplace_back("schedule must be 'cosine'");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        p.emplace_back("adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) {
        p.emplace_back("adam_eps must be > 0");
    }
    for (const auto& s : adv.validate()) {
        p.push_back("adv: " + s);
    }
    for (const auto& s : neg_sampler.validate()) {
        p.push_back("negatives: " + s);
    }
    if (neg_sampler.init != SamplerInit::Uniform01) {
        p.emplace_back("negatives: init must be uniform01");
    }
    TowerConfig probe = towers;
    if (probe.vocabulary.empty()) {
        probe.vocabulary = {"placeholder"};
    }
    for (const auto& s : probe.validate()) {
        p.push_back("towers: " + s);
    }
    return p;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"gamma", gamma},
            {"batch_disc", batch_disc},
            {"batch_gen", batch_gen},
            {"total_steps", total_steps},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"schedule", schedule},
            {"warmup_steps", warmup_steps},
            {"grad_clip", grad_clip},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"adv", budget_json(adv)},
            {"negatives", sampler_json(neg_sampler)},
            {"seed", seed},
            {"ablation", to_string(ablation)},
            {"checkpoint_every", checkpoint_every},
            {"towers", tower_config_json(towers)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.gamma = j.at("gamma");
    c.batch_disc = j.at("batch_disc");
    c.batch_gen = j.at("batch_gen");
    c.total_steps = j.at("total_steps");
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.schedule = j.at("schedule");
    c.warmup_steps = j.at("warmup_steps");
    c.grad_clip = j.at("grad_clip");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_eps = j.at("adam_eps");
    c.adv = budget_from_json(j.at("adv"));
    c.neg_sampler = sampler_from_json(j.at("negatives"));
    c.seed = j.at("seed");
    c.ablation = parse_ablation(j.at("ablation"));
    c.checkpoint_every = j.at("checkpoint_every");
    c.towers = tower_config_from_json(j.at("towers"));
    return c;
}

void TrainConfig::apply(const KeyValueConfig& kv, std::vector<std::string>& problems) {
    kv.read("train.gamma", gamma);
    kv.read("train.batch_disc", batch_disc);
    kv.read("train.batch_gen", batch_gen);
    kv.read("train.steps", total_steps);
    kv.read("train.lr", lr);
    kv.read("train.weight_decay", weight_decay);
    kv.read("train.schedule", schedule);
    kv.read("train.warmup_steps", warmup_steps);
    kv.read("train.grad_clip", grad_clip);
    kv.read("train.adam_beta1", adam_beta1);
    kv.read("train.adam_beta2", adam_beta2);
    kv.read("train.adam_eps", adam_eps);
    kv.read("train.seed", seed);
    kv.read("train.checkpoint_every", checkpoint_every);
    std::string text;
    if (kv.has("train.ablation")) {
        kv.read("train.ablation", text);
        try {
            ablation = parse_ablation(text);
        } catch (const ConfigError& e) {
            problems.emplace_back(e.what());
        }
    }
    if (kv.has("adv.norm")) {
        kv.read("adv.norm", text);
        try {
            adv.norm = parse_norm(text);
        } catch (const ConfigError& e) {
            problems.emplace_back(e.what());
        }
    }
    kv.read("adv.eps", adv.epsilon);
    kv.read("adv.alpha1", adv.alpha1);
    kv.read("adv.steps", adv.t_adv);
    kv.read("negatives.steps", neg_sampler.steps);
    kv.read("negatives.lr", neg_sampler.step_size);
    kv.read("negatives.beta1", neg_sampler.momentum_beta1);
    kv.read("negatives.beta2", neg_sampler.adaptive_beta2);
    kv.read("negatives.adaptive", neg_sampler.adaptive);
    kv.read("negatives.weight_decay", neg_sampler.weight_decay);
    kv.read("negatives.noise", neg_sampler.noise_scale);
    kv.read("negatives.clamp", neg_sampler.clamp);
    kv.read("towers.resolution", towers.resolution);
    kv.read("towers.embed_dim", towers.embed_dim);
    kv.read("towers.channels", towers.channels);
    kv.read("towers.max_len", towers.max_len);
    kv.read("towers.seed", towers.seed);
    kv.read("towers.logit_scale", towers.logit_scale);
    for (const auto& e : kv.problems()) {
        problems.push_back(e);
    }
}

TrainState init_train_state(const TrainConfig& config, const TowerConfig& tower_config) {
    TrainState state;
    state.towers = make_toy_towers(tower_config);
    state.optimizer = AdamW(std::as_const(state.towers.vision.net).parameters(),
                            {config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay});
    state.seed = config.seed;
    return state;
}

StepMetrics train_step(TrainState& state, const Batch& batch, const TrainConfig& config, BranchCounters* counters) {
    const TowerPair& towers = state.towers;
    if (!towers.vision.trainable) {
        throw ConfigError("vision tower is not trainable");
    }
    const std::size_t b = batch.images.batch();
    if (b != batch.captions.size()) {
        throw InputError("batch image/caption count mismatch");
    }
    const std::size_t b_gen = std::min(config.batch_gen, b);
    const TextTokens tokens = towers.tokenize(batch.captions);
    const Embedding text_emb = encode_text(towers, tokens);
    const WarmupCosine schedule(config.lr, config.warmup_steps, std::max<std::size_t>(config.total_steps, 1));

    StepMetrics m;
    m.step = state.step;
    m.lr = schedule(state.step);
    m.neg_energy = std::numeric_limits<double>::quiet_NaN();
    nn::ParamGrads grads = towers.vision.net.zero_grads();

    if (config.ablation != Ablation::EnergyOnly) {
        if (counters != nullptr) {
            ++counters->adversarial;
        }
        const ImageTensor adv = craft_adversarial(towers, batch.images, tokens, config.adv,
                                                  derive_seed(state.seed, "adversarial", state.step));
        LossAndGrads l = clip_loss_with_param_grads(towers, adv.tensor(), text_emb);
        m.l_adv = l.value;
        nn::add_into(grads, l.grads);
    }

    const Embedding gen_texts(text_emb.tensor().slice_rows(0, b_gen));
    const ImageTensor positives = batch.images.slice(0, b_gen);
    if (config.ablation != Ablation::AdvOnly) {
        if (counters != nullptr) {
            ++counters->negative_generation;
        }
        const ImageTensor negatives =
            generate_negatives(towers, gen_texts, config.neg_sampler, derive_seed(state.seed, "negatives", state.step));
        const ImagePass pass = forward_image(towers, concat(positives, negatives).tensor());
        const Embedding pos_emb(pass.embedding.tensor().slice_rows(0, b_gen));
        const Embedding neg_emb(pass.embedding.tensor().slice_rows(b_gen, 2 * b_gen));
        const EnergyLossGrads l = contrastive_energy_loss_grads(pos_emb, neg_emb, gen_texts, towers.logit_scale);
        m.l_jem = l.value;
        m.pos_energy = mean(joint_energy(pos_emb, gen_texts));
        m.neg_energy = mean(joint_energy(neg_emb, gen_texts));
        Tensor grad_emb = concat_rows(l.grad_positive, l.grad_negative);
        grad_emb *= config.gamma;
        backward_image(towers, pass, grad_emb, &grads);
    } else {
        m.pos_energy = mean(joint_energy(encode_image(towers, positives), gen_texts));
    }

    m.loss = m.l_adv + config.gamma * m.l_jem;
    if (!std::isfinite(m.loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (l_adv=" + fmt(m.l_adv) +
                           ", l_jem=" + fmt(m.l_jem) + ")");
    }
    m.grad_norm = clip_global_norm(grads, config.grad_clip);
    if (!std::isfinite(m.grad_norm)) {
        throw NumericError("non-finite gradient at step " + std::to_string(state.step));
    }
    state.optimizer.step(state.towers.vision.net.parameters(), grads, m.lr);
    ++state.step;
    state.last = m;
    return m;
}

std::filesystem::path state_path_for(const std::filesystem::path& towers_path) {
    std::filesystem::path p = towers_path;
    p.replace_extension(".state");
    return p;
}

void save_train_state(const TrainState& state, const TrainConfig& config, const std::filesystem::path& towers_path,
                      const std::filesystem::path& state_path) {
    save_checkpoint(state.towers, towers_path);
    nlohmann::json header;
    header["kind"] = "train_state";
    header["version"] = kStateVersion;
    header["step"] = state.step;
    header["seed"] = state.seed;
    header["optimizer_steps"] = state.optimizer.steps_taken();
    header["config"] = config.to_json();
    header["towers_file"] = towers_path.filename().string();
    header["towers_id"] = file_id(towers_path);
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    const auto& m = state.optimizer.first_moments();
    const auto& v = state.optimizer.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        tensors.emplace_back("adam.m." + std::to_string(i), &m[i]);
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        tensors.emplace_back("adam.v." + std::to_string(i), &v[i]);
    }
    container::write(state_path, header, tensors);
}

TrainState load_train_state(const std::filesystem::path& towers_path, const std::filesystem::path& state_path,
                            TrainConfig* config_out) {
    const container::Contents contents = container::read(state_path, "train_state", kStateVersion);
    TrainConfig config;
    TrainState state;
    try {
        if (contents.header.at("towers_id").get<std::string>() != file_id(towers_path)) {
            throw LoadError("train state " + state_path.string() + " does not belong to " + towers_path.string());
        }
        config = TrainConfig::from_json(contents.header.at("config"));
        state.step = contents.header.at("step");
        state.seed = contents.header.at("seed");
        state.towers = load_checkpoint(towers_path);
        state.optimizer = AdamW(std::as_const(state.towers.vision.net).parameters(),
                                {config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay});
        state.optimizer.set_steps_taken(contents.header.at("optimizer_steps"));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed train state header: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("train state holds an invalid config: ") + e.what());
    }
    auto& m = state.optimizer.first_moments();
    auto& v = state.optimizer.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        const Tensor& sm = contents.get("adam.m." + std::to_string(i));
        const Tensor& sv = contents.get("adam.v." + std::to_string(i));
        if (sm.shape() != m[i].shape() || sv.shape() != v[i].shape()) {
            throw LoadError("optimizer moment shape mismatch at parameter " + std::to_string(i));
        }
        m[i] = sm;
        v[i] = sv;
    }
    if (config_out != nullptr) {
        *config_out = config;
    }
    return state;
}

std::vector<std::string> caption_vocabulary(const PairedDataset& dataset) {
    std::set<std::string> words;
    for (const auto& rec : dataset.records()) {
        std::istringstream in(rec.caption);
        std::string w;
        while (in >> w) {
            std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
            words.insert(w);
        }
    }
    return {words.begin(), words.end()};
}

void write_metrics_header(std::ostream& out) {
    out << "step,lr,loss,l_adv,l_jem,pos_energy,neg_energy,grad_norm\n";
}

void write_metrics_row(std::ostream& out, const StepMetrics& m) {
    out << m.step << ',' << fmt(m.lr) << ',' << fmt(m.loss) << ',' << fmt(m.l_adv) << ',' << fmt(m.l_jem) << ','
        << fmt(m.pos_energy) << ',' << fmt(m.neg_energy) << ',' << fmt(m.grad_norm) << '\n';
}

FitResult fit(const TrainConfig& config_in, const PairedDataset& dataset, const FitOptions& options) {
    if (dataset.size() == 0) {
        throw InputError("dataset is empty");
    }
    TrainConfig config = config_in;
    if (config.towers.vocabulary.empty()) {
        config.towers.vocabulary = caption_vocabulary(dataset);
    }
    if (config.towers.resolution != dataset.resolution()) {
        throw ConfigError("tower resolution " + std::to_string(config.towers.resolution) +
                          " does not match dataset resolution " + std::to_string(dataset.resolution()));
    }
    if (const auto problems = config.validate(); !problems.empty()) {
        std::string msg = "invalid train config:";
        for (const auto& p : problems) {
            msg += "\n  " + p;
        }
        throw ConfigError(msg);
    }

    FitResult result;
    if (options.resume_from) {
        TrainConfig saved;
        result.state = load_train_state(*options.resume_from, state_path_for(*options.resume_from), &saved);
        if (saved.to_json() != config.to_json()) {
            throw ConfigError("resume config differs from the checkpoint's config");
        }
    } else {
        result.state = init_train_state(config, config.towers);
    }
    TrainState& state = result.state;

    // Validate every caption up front.
    {
        std::vector<std::string> captions;
        for (const auto& rec : dataset.records()) {
            captions.push_back(rec.caption);
        }
        (void)state.towers.tokenize(captions);
    }

    PairedDataset data = dataset;
    data.set_shuffle_seed(derive_seed(config.seed, "data"));

    const bool writing = !options.out_dir.empty();
    std::ofstream metrics;
    if (writing) {
        std::filesystem::create_directories(options.out_dir / "checkpoints");
        const auto metrics_path = options.out_dir / "metrics.csv";
        std::vector<std::string> kept;
        if (options.resume_from && std::filesystem::exists(metrics_path)) {
            std::ifstream old(metrics_path);
            std::string line;
            std::getline(old, line);
            while (std::getline(old, line)) {
                const auto comma = line.find(',');
                if (comma != std::string::npos && std::stoull(line.substr(0, comma)) < state.step) {
                    kept.push_back(line);
                }
            }
        }
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) {
            throw IoError("cannot write " + metrics_path.string());
        }
        write_metrics_header(metrics);
        for (const auto& line : kept) {
            metrics << line << '\n';
        }
        metrics.flush();
    }

    auto checkpoint = [&](const std::string& stem) {
        const auto towers_path = options.out_dir / "checkpoints" / (stem + ".towers");
        save_train_state(state, config, towers_path, state_path_for(towers_path));
        return towers_path;
    };

    const std::size_t end = options.stop_after ? std::min(*options.stop_after, config.total_steps)
                                               : config.total_steps;
    while (state.step < end) {
        const Batch batch = data.batch(data.batch_indices(state.step, config.batch_disc));
        const StepMetrics m = train_step(state, batch, config, options.counters);
        result.log.push_back(m);
        if (writing) {
            write_metrics_row(metrics, m);
            metrics.flush();
            if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < end) {
                char stem[32];
                std::snprintf(stem, sizeof(stem), "step_%06zu", state.step);
                checkpoint(stem);
            }
        }
        if (options.on_step) {
            options.on_step(m);
        }
    }
    if (writing) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "step_%06zu", state.step);
        result.final_checkpoint = checkpoint(stem);
        if (state.step == config.total_steps) {
            std::filesystem::copy_file(result.final_checkpoint, options.out_dir / "final.towers",
                                       std::filesystem::copy_options::overwrite_existing);
            std::filesystem::copy_file(state_path_for(result.final_checkpoint), options.out_dir / "final.state",
                                       std::filesystem::copy_options::overwrite_existing);
            result.final_checkpoint = options.out_dir / "final.towers";
        }
    }
    return result;
}

EnergyGap measure_energy_gap(const TowerPair& towers, const PairedDataset& dataset, const SamplerConfig& sampler,
                             std::size_t pairs, std::size_t chunk, std::uint64_t seed) {
    if (pairs == 0 || chunk == 0) {
        throw ConfigError("energy gap needs pairs >= 1 and chunk >= 1");
    }
    const std::vector<std::size_t> order = epoch_permutation(dataset.size(), derive_seed(seed, "gap-order"), 0);
    std::vector<double> pos;
    std::vector<double> neg;
    for (std::size_t start = 0, c = 0; start < pairs; start += chunk, ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t j = start; j < std::min(pairs, start + chunk); ++j) {
            idx.push_back(order[j % order.size()]);
        }
        const Batch batch = dataset.batch(idx);
        const Embedding texts = encode_text(towers, towers.tokenize(batch.captions));
        const ImageTensor negatives = generate_negatives(towers, texts, sampler, derive_seed(seed, "gap", c));
        for (double e : joint_energy(encode_image(towers, batch.images), texts)) {
            pos.push_back(e);
        }
        for (double e : joint_energy(encode_image(towers, negatives), texts)) {
            neg.push_back(e);
        }
    }
    return {mean(pos), mean(neg)};
}

}  // namespace jem

#include "jem/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "jem/config.hpp"
#include "jem/dataset.hpp"
#include "jem/error.hpp"
#include "jem/guidance.hpp"
#include "jem/image_io.hpp"
#include "jem/metric.hpp"
#include "jem/rng.hpp"
#include "jem/sampler.hpp"
#include "jem/trainer.hpp"

namespace jem {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

// Resolved configuration of one command, written before work starts and
// completed with outputs at the end.
class RunManifest {
public:
    RunManifest(fs::path path, std::string command, const std::vector<std::string>& args) : path_(std::move(path)) {
        j_["tool"] = "jem";
        j_["tool_version"] = kToolVersion;
        j_["command"] = std::move(command);
        j_["argv"] = args;
        j_["started_at"] = now_iso();
        j_["config"] = json::object();
        j_["seeds"] = json::object();
        j_["checkpoints"] = json::object();
    }
    json& operator[](const char* key) { return j_[key]; }
    void begin() { write_json(path_, j_); }
    void finish() {
        j_["finished_at"] = now_iso();
        write_json(path_, j_);
    }

private:
    fs::path path_;
    json j_;
};

json checkpoint_entry(const fs::path& path) { return {{"path", path.string()}, {"id", file_id(path)}}; }

TowerPair load_towers(const fs::path& path) {
    if (!fs::exists(path)) {
        throw LoadError("checkpoint not found: " + path.string());
    }
    return load_checkpoint(path);
}

struct Pairs {
    ImageTensor images{Tensor({1, 3, 1, 1})};
    std::vector<std::string> names;
    std::vector<std::string> captions;
};

Pairs load_pairs(const std::string& data, const std::vector<std::string>& images,
                 const std::vector<std::string>& captions, std::size_t limit) {
    Pairs p;
    if (!data.empty()) {
        if (!images.empty()) {
            throw ConfigError("use either --data or --image/--caption, not both");
        }
        const PairedDataset ds = PairedDataset::load(data);
        const std::size_t n = limit > 0 ? std::min(limit, ds.size()) : ds.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = i;
            p.names.push_back(ds.records()[i].path);
        }
        Batch b = ds.batch(idx);
        p.images = std::move(b.images);
        p.captions = std::move(b.captions);
        return p;
    }
    if (images.empty()) {
        throw ConfigError("no inputs: give --data or --image/--caption pairs");
    }
    if (images.size() != captions.size()) {
        throw ConfigError("--image and --caption must be given the same number of times");
    }
    std::vector<fs::path> paths(images.begin(), images.end());
    p.images = read_png_batch(paths);
    p.names = images;
    p.captions = captions;
    return p;
}

fs::path manifest_beside(const fs::path& out_file) { return fs::path(out_file.string() + ".run.json"); }

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    return out;
}

std::string sample_name(const char* prefix, std::size_t a, std::size_t b) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%02zu_seed%02zu", prefix, a, b);
    return buf;
}

std::string seed_name(std::size_t j) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seed%02zu", j);
    return buf;
}

// ---- make-dataset ----------------------------------------------------------

struct MakeDatasetArgs {
    std::string out;
    std::size_t n = 320;
    std::uint64_t seed = 0;
    std::size_t resolution = 32;
};

int cmd_make_dataset(const MakeDatasetArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    DatasetSpec spec = DatasetSpec::shapes_default();
    spec.count = a.n;
    spec.seed = a.seed;
    spec.resolution = a.resolution;
    RunManifest manifest(fs::path(a.out) / "run_manifest.json", "make-dataset", argv);
    manifest["config"] = {{"count", spec.count}, {"resolution", spec.resolution}, {"shapes", spec.shapes}};
    for (const auto& c : spec.colors) {
        manifest["config"]["colors"].push_back(c.name);
    }
    manifest["seeds"]["seed"] = a.seed;
    manifest.begin();
    const PairedDataset ds = make_synthetic_dataset(spec, a.out);
    manifest["outputs"] = {{"records", ds.size()}, {"manifest", (fs::path(a.out) / "manifest.tsv").string()}};
    manifest.finish();
    out << "wrote " << ds.size() << " records to " << a.out << '\n';
    return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    std::string config;
    std::string resume;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;  // config key -> value
    std::size_t stop_after = 0;
    std::size_t log_every = 100;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    KeyValueConfig kv = a.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(a.config);
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + s + "'");
        }
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : a.flags) {
        kv.set(k, v);
    }

    const PairedDataset dataset = PairedDataset::load(a.data);
    TrainConfig config;
    std::optional<fs::path> resume;
    if (!a.resume.empty()) {
        resume = fs::path(a.resume);
        if (!fs::exists(*resume)) {
            throw LoadError("checkpoint not found: " + a.resume);
        }
        load_train_state(*resume, state_path_for(*resume), &config);
    } else {
        config.towers.resolution = dataset.resolution();
    }
    std::vector<std::string> problems;
    config.apply(kv, problems);
    for (const auto& key : kv.unused()) {
        problems.push_back("unknown config key '" + key + "'");
    }
    if (config.towers.vocabulary.empty()) {
        config.towers.vocabulary = caption_vocabulary(dataset);
    }
    for (const auto& p : config.validate()) {
        problems.push_back(p);
    }
    if (!problems.empty()) {
        std::string msg = "invalid training configuration (" + std::to_string(problems.size()) + " problems)";
        for (const auto& p : problems) {
            msg += "\n  " + p;
        }
        throw ConfigError(msg);
    }

    const fs::path out_dir(a.out);
    RunManifest manifest(out_dir / "run_manifest.json", "train", argv);
    manifest["config"] = config.to_json();
    manifest["seeds"] = {{"seed", config.seed},
                         {"data_order", derive_seed(config.seed, "data")},
                         {"towers_init", derive_seed(config.towers.seed, "towers")}};
    manifest["dataset"] = {{"path", a.data}, {"records", dataset.size()}};
    if (resume) {
        manifest["checkpoints"]["resume_from"] = checkpoint_entry(*resume);
    }
    manifest.begin();

    FitOptions options;
    options.out_dir = out_dir;
    options.resume_from = resume;
    if (a.stop_after > 0) {
        options.stop_after = a.stop_after;
    }
    options.on_step = [&](const StepMetrics& m) {
        if (a.log_every > 0 && (m.step % a.log_every == 0 || m.step + 1 == config.total_steps)) {
            out << "step " << m.step << " lr " << m.lr << " loss " << m.loss << " l_adv " << m.l_adv << " l_jem "
                << m.l_jem << " pos " << m.pos_energy << " neg " << m.neg_energy << '\n';
            out.flush();
        }
    };
    const FitResult result = fit(config, dataset, options);
    if (!result.final_checkpoint.empty()) {
        manifest["checkpoints"]["final"] = checkpoint_entry(result.final_checkpoint);
    }
    manifest["outputs"] = {{"steps_completed", result.state.step},
                           {"metrics", (out_dir / "metrics.csv").string()}};
    manifest.finish();
    out << "checkpoint " << result.final_checkpoint.string() << '\n';
    return 0;
}

// ---- generate --------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::vector<std::string> prompts;
    std::size_t seeds = 4;
    std::uint64_t seed = 0;
    std::size_t steps = 50;
    double lr = 0.025;
    double momentum = 0.0;
    double beta2 = 0.999;
    double noise = 0.0;
    double weight_decay = 0.0;
    bool no_clamp = false;
    std::string mode = "inference";
    std::string out = "generated";
    bool trace = false;
};

int cmd_generate(const GenerateArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    if (a.prompts.empty()) {
        throw ConfigError("at least one --prompt is required");
    }
    SamplerConfig cfg = SamplerConfig::inference_default();
    cfg.steps = a.steps;
    cfg.step_size = a.lr;
    cfg.momentum_beta1 = a.momentum;
    cfg.adaptive_beta2 = a.beta2;
    cfg.noise_scale = a.noise;
    cfg.weight_decay = a.weight_decay;
    cfg.clamp = !a.no_clamp;
    if (a.mode == "training") {
        cfg.mode = SamplerMode::Training;
    } else if (a.mode != "inference") {
        throw ConfigError("--mode must be inference or training");
    }
    if (const auto p = cfg.validate(); !p.empty()) {
        throw ConfigError(p.front());
    }
    const TowerPair towers = load_towers(a.checkpoint);
    const TextTokens tokens = towers.tokenize(a.prompts);

    const fs::path dir(a.out);
    RunManifest manifest(dir / "run_manifest.json", "generate", argv);
    manifest["config"] = {{"prompts", a.prompts}, {"seeds", a.seeds},       {"steps", cfg.steps},
                          {"lr", cfg.step_size},  {"momentum", a.momentum}, {"beta2", a.beta2},
                          {"noise", a.noise},     {"weight_decay", a.weight_decay},
                          {"clamp", cfg.clamp},   {"mode", a.mode},         {"trace", a.trace}};
    manifest["seeds"]["seed"] = a.seed;
    manifest["checkpoints"]["towers"] = checkpoint_entry(a.checkpoint);
    manifest.begin();

    std::ofstream index = open_out(dir / "index.tsv");
    index << "file\tprompt\tseed_index\tinitial_energy\tfinal_energy\n";
    for (std::size_t i = 0; i < a.prompts.size(); ++i) {
        const std::vector<std::size_t> row{i};
        const TextTokens one = tokens.select(row);
        for (std::size_t j = 0; j < a.seeds; ++j) {
            SamplerConfig c = cfg;
            c.seed = derive_seed(a.seed, "generate", j);
            const SampleTrace trace = generate(towers, one, c);
            const std::string name = sample_name("prompt", i, j);
            write_png(dir / (name + ".png"), trace.final);
            if (a.trace) {
                std::ofstream t = open_out(dir / (name + "_trace.csv"));
                t << "step,energy\n" << std::setprecision(10);
                for (std::size_t s = 0; s < trace.energy_trace.size(); ++s) {
                    t << s << ',' << trace.energy_trace[s] << '\n';
                }
            }
            index << name << ".png\t" << a.prompts[i] << '\t' << j << '\t' << trace.energy_trace.front() << '\t'
                  << trace.energy_trace.back() << '\n';
        }
    }
    manifest["outputs"] = {{"images", a.prompts.size() * a.seeds}, {"dir", dir.string()}};
    manifest.finish();
    out << "wrote " << a.prompts.size() * a.seeds << " images to " << dir.string() << '\n';
    return 0;
}

// ---- ddim / guide ----------------------------------------------------------

struct GuideArgs {
    std::string checkpoint;
    std::string denoiser;
    std::string prompt;
    double scale = 20.0;
    std::size_t ddim_steps = 25;
    std::string anneal = "constant";
    std::size_t seeds = 4;
    std::uint64_t seed = 0;
    std::string out = "guided";
};

int cmd_guide(const GuideArgs& a, bool guided, const std::vector<std::string>& argv, std::ostream& out) {
    GuidanceConfig cfg;
    cfg.scale = guided ? a.scale : 0.0;
    cfg.ddim_steps = a.ddim_steps;
    if (a.anneal == "linear") {
        cfg.anneal = GuidanceAnneal::Linear;
    } else if (a.anneal != "constant") {
        throw ConfigError("--anneal must be constant or linear");
    }
    if (const auto p = cfg.validate(); !p.empty()) {
        throw ConfigError(p.front());
    }
    if (!fs::exists(a.denoiser)) {
        throw LoadError("denoiser checkpoint not found: " + a.denoiser);
    }
    const ToyDenoiser model = ToyDenoiser::load(a.denoiser);
    const DenoiserHandle handle = model.handle();
    std::optional<TowerPair> towers;
    std::optional<TextTokens> text;
    if (guided) {
        if (a.prompt.empty()) {
            throw ConfigError("--prompt is required");
        }
        towers = load_towers(a.checkpoint);
        text = towers->tokenize({a.prompt});
    }
    const fs::path dir(a.out);
    RunManifest manifest(dir / "run_manifest.json", guided ? "guide" : "ddim", argv);
    manifest["config"] = {{"ddim_steps", cfg.ddim_steps}, {"eta", cfg.eta}, {"seeds", a.seeds}};
    if (guided) {
        manifest["config"]["prompt"] = a.prompt;
        manifest["config"]["scale"] = cfg.scale;
        manifest["config"]["anneal"] = a.anneal;
        manifest["checkpoints"]["towers"] = checkpoint_entry(a.checkpoint);
    }
    manifest["checkpoints"]["denoiser"] = checkpoint_entry(a.denoiser);
    manifest["seeds"]["seed"] = a.seed;
    manifest.begin();
    for (std::size_t j = 0; j < a.seeds; ++j) {
        GuidanceConfig c = cfg;
        c.seed = derive_seed(a.seed, "sample", j);
        const ImageTensor img =
            guided ? guided_ddim_sample(handle, *towers, *text, c, 1) : ddim_sample(handle, c, 1);
        write_png(dir / (seed_name(j) + ".png"), img);
    }
    manifest["outputs"] = {{"images", a.seeds}, {"dir", dir.string()}};
    manifest.finish();
    out << "wrote " << a.seeds << " images to " << dir.string() << '\n';
    return 0;
}

// ---- score / attack / blend --------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::vector<std::string> images;
    std::vector<std::string> captions;
    std::size_t limit = 0;
    std::string out;
    // attack
    std::string eps = "2/255";
    double alpha1 = 0.25;
    std::size_t steps = 10;
    std::string norm = "linf";
    std::string direction = "decrease";
    // blend
    std::string lambdas = "0:1:0.05";
    std::uint64_t seed = 0;
};

int cmd_score(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    const TowerPair towers = load_towers(a.checkpoint);
    const Pairs p = load_pairs(a.data, a.images, a.captions, a.limit);
    RunManifest manifest(manifest_beside(a.out), "score", argv);
    manifest["config"] = {{"data", a.data}, {"images", p.names}, {"captions", p.captions}};
    manifest["checkpoints"]["towers"] = checkpoint_entry(a.checkpoint);
    manifest.begin();
    ScoreReport report = score(towers, p.images, towers.tokenize(p.captions));
    report.provenance["checkpoint"] = file_id(a.checkpoint);
    report.provenance["command"] = "score";
    std::ofstream f = open_out(a.out);
    write_score_csv(f, report, p.names, p.captions);
    manifest["outputs"] = {{"report", a.out}, {"mean", report.mean}};
    manifest.finish();
    out << "mean score " << report.mean << '\n';
    return 0;
}

int cmd_attack(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    const auto eps = parse_real(a.eps);
    if (!eps) {
        throw ConfigError("--eps: cannot parse '" + a.eps + "'");
    }
    AdvBudget budget{parse_norm(a.norm), *eps, a.alpha1, a.steps};
    if (const auto p = budget.validate(); !p.empty()) {
        throw ConfigError(p.front());
    }
    const AttackDirection direction = parse_direction(a.direction);
    const TowerPair towers = load_towers(a.checkpoint);
    const Pairs p = load_pairs(a.data, a.images, a.captions, a.limit);
    RunManifest manifest(manifest_beside(a.out), "attack", argv);
    manifest["config"] = {{"data", a.data},        {"images", p.names},    {"captions", p.captions},
                          {"eps", budget.epsilon}, {"alpha1", a.alpha1},   {"steps", a.steps},
                          {"norm", a.norm},        {"direction", a.direction}};
    manifest["checkpoints"]["towers"] = checkpoint_entry(a.checkpoint);
    manifest.begin();
    const TextTokens tokens = towers.tokenize(p.captions);
    const ScoreReport clean = score(towers, p.images, tokens);
    ScoreReport attacked = attacked_score(towers, p.images, tokens, direction, budget);
    double shift = 0.0;
    for (std::size_t i = 0; i < clean.scores.size(); ++i) {
        shift += std::abs(attacked.scores[i] - clean.scores[i]) / static_cast<double>(clean.scores.size());
    }
    json prov = attacked.provenance;
    prov["checkpoint"] = file_id(a.checkpoint);
    prov["command"] = "attack";
    prov["clean_mean"] = clean.mean;
    prov["attacked_mean"] = attacked.mean;
    prov["mean_abs_shift"] = shift;
    std::ofstream f = open_out(a.out);
    std::istringstream lines(prov.dump(2));
    std::string line;
    while (std::getline(lines, line)) {
        f << "# " << line << '\n';
    }
    f << "index,image,caption,clean_score,attacked_score\n" << std::setprecision(10);
    for (std::size_t i = 0; i < clean.scores.size(); ++i) {
        f << i << ',' << p.names[i] << ',' << p.captions[i] << ',' << clean.scores[i] << ',' << attacked.scores[i]
          << '\n';
    }
    manifest["outputs"] = {{"report", a.out}, {"mean_abs_shift", shift}};
    manifest.finish();
    out << "clean " << clean.mean << " attacked " << attacked.mean << " mean |shift| " << shift << '\n';
    return 0;
}

int cmd_blend(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    const std::vector<double> grid = parse_lambda_grid(a.lambdas);
    const TowerPair towers = load_towers(a.checkpoint);
    const Pairs p = load_pairs(a.data, a.images, a.captions, a.limit);
    RunManifest manifest(manifest_beside(a.out), "blend", argv);
    manifest["config"] = {{"data", a.data}, {"images", p.names}, {"captions", p.captions}, {"lambdas", grid}};
    manifest["seeds"]["seed"] = a.seed;
    manifest["checkpoints"]["towers"] = checkpoint_entry(a.checkpoint);
    manifest.begin();
    const BlendCurve curve = blend_curve(towers, p.images, towers.tokenize(p.captions), grid, a.seed);
    std::ofstream f = open_out(a.out);
    write_blend_csv(f, curve, {{"checkpoint", file_id(a.checkpoint)}, {"command", "blend"}, {"images", p.names.size()}});
    manifest["outputs"] = {{"report", a.out}, {"rows", grid.size()}};
    manifest.finish();
    out << "wrote " << grid.size() << " rows to " << a.out << '\n';
    return 0;
}

// ---- train-denoiser ----------------------------------------------------------

struct DenoiserArgs {
    std::string data;
    std::string out;
    DenoiserTrainConfig cfg;
    std::size_t log_every = 200;
};

int cmd_train_denoiser(const DenoiserArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
    const PairedDataset dataset = PairedDataset::load(a.data);
    RunManifest manifest(manifest_beside(a.out), "train-denoiser", argv);
    manifest["config"] = {{"steps", a.cfg.steps},         {"batch", a.cfg.batch},
                          {"lr", a.cfg.lr},               {"timesteps", a.cfg.timesteps},
                          {"width", a.cfg.model.width},   {"width_low", a.cfg.model.width_low},
                          {"data", a.data}};
    manifest["seeds"] = {{"seed", a.cfg.seed}, {"init", a.cfg.model.seed}};
    manifest.begin();
    const ToyDenoiser model = train_toy_denoiser(a.cfg, dataset, [&](std::size_t step, double loss) {
        if (a.log_every > 0 && step % a.log_every == 0) {
            out << "step " << step << " loss " << loss << '\n';
            out.flush();
        }
    });
    model.save(a.out);
    manifest["checkpoints"]["denoiser"] = checkpoint_entry(a.out);
    manifest.finish();
    out << "checkpoint " << a.out << '\n';
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint image-text energy model toolkit", "jem"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    MakeDatasetArgs md;
    auto* make = app.add_subcommand("make-dataset", "Render the synthetic captioned shapes dataset");
    make->add_option("--out", md.out, "Output directory")->required();
    make->add_option("--n", md.n, "Number of records")->capture_default_str();
    make->add_option("--seed", md.seed, "Render seed")->capture_default_str();
    make->add_option("--resolution", md.resolution, "Image side length")->capture_default_str();

    TrainArgs ta;
    std::string t_steps, t_gamma, t_lr, t_ablation, t_seed, t_bd, t_bg, t_warmup, t_ckpt;
    auto* train = app.add_subcommand("train", "Train the vision tower with L_adv + gamma * L_JEM");
    train->add_option("--data", ta.data, "Dataset directory (manifest.tsv)")->required();
    train->add_option("--out", ta.out, "Run directory")->required();
    train->add_option("--config", ta.config, "key = value config file");
    train->add_option("--set", ta.sets, "Override, section.key=value (repeatable)");
    train->add_option("--resume", ta.resume, "Towers checkpoint with a .state sidecar");
    train->add_option("--steps", t_steps, "Total optimizer steps");
    train->add_option("--gamma", t_gamma, "Energy-loss weight (default 0.1)");
    train->add_option("--lr", t_lr, "Peak learning rate");
    train->add_option("--ablation", t_ablation, "full, adv-only or energy-only");
    train->add_option("--seed", t_seed, "Run seed");
    train->add_option("--batch-disc", t_bd, "Discriminative batch size");
    train->add_option("--batch-gen", t_bg, "Negatives per step");
    train->add_option("--warmup", t_warmup, "Warmup steps");
    train->add_option("--checkpoint-every", t_ckpt, "Checkpoint interval in steps");
    train->add_option("--stop-after", ta.stop_after, "Stop after this many completed steps");
    train->add_option("--log-every", ta.log_every, "Progress line interval")->capture_default_str();

    GenerateArgs ga;
    auto* gen = app.add_subcommand("generate", "Pixel-space text-to-image generation");
    gen->add_option("--checkpoint", ga.checkpoint, "Towers checkpoint")->required();
    gen->add_option("--prompt", ga.prompts, "Caption (repeatable)")->required();
    gen->add_option("--seeds", ga.seeds, "Samples per prompt")->capture_default_str();
    gen->add_option("--seed", ga.seed, "Base seed")->capture_default_str();
    gen->add_option("--steps", ga.steps, "Optimizer steps")->capture_default_str();
    gen->add_option("--lr", ga.lr, "Step size")->capture_default_str();
    gen->add_option("--momentum", ga.momentum, "beta1")->capture_default_str();
    gen->add_option("--beta2", ga.beta2, "Adaptive beta2")->capture_default_str();
    gen->add_option("--noise", ga.noise, "Gradient noise scale")->capture_default_str();
    gen->add_option("--weight-decay", ga.weight_decay, "Decoupled decay")->capture_default_str();
    gen->add_flag("--no-clamp", ga.no_clamp, "Do not clamp iterates to [0, 1]");
    gen->add_option("--mode", ga.mode, "inference or training objective")->capture_default_str();
    gen->add_option("--out", ga.out, "Output directory")->capture_default_str();
    gen->add_flag("--trace", ga.trace, "Write per-step energy CSVs");

    GuideArgs ua;
    auto* guide = app.add_subcommand("guide", "Energy-guided DDIM sampling");
    guide->add_option("--checkpoint", ua.checkpoint, "Towers checkpoint")->required();
    guide->add_option("--denoiser", ua.denoiser, "Denoiser checkpoint")->required();
    guide->add_option("--prompt", ua.prompt, "Caption")->required();
    guide->add_option("--scale", ua.scale, "Guidance scale s")->capture_default_str();
    guide->add_option("--ddim-steps", ua.ddim_steps, "DDIM steps")->capture_default_str();
    guide->add_option("--anneal", ua.anneal, "constant or linear")->capture_default_str();
    guide->add_option("--seeds", ua.seeds, "Number of samples")->capture_default_str();
    guide->add_option("--seed", ua.seed, "Base seed")->capture_default_str();
    guide->add_option("--out", ua.out, "Output directory")->capture_default_str();

    GuideArgs da;
    da.out = "ddim";
    auto* ddim = app.add_subcommand("ddim", "Unguided DDIM sampling");
    ddim->add_option("--denoiser", da.denoiser, "Denoiser checkpoint")->required();
    ddim->add_option("--ddim-steps", da.ddim_steps, "DDIM steps")->capture_default_str();
    ddim->add_option("--seeds", da.seeds, "Number of samples")->capture_default_str();
    ddim->add_option("--seed", da.seed, "Base seed")->capture_default_str();
    ddim->add_option("--out", da.out, "Output directory")->capture_default_str();

    EvalArgs ea;
    auto add_inputs = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", ea.checkpoint, "Towers checkpoint")->required();
        sub->add_option("--data", ea.data, "Dataset directory with manifest.tsv");
        sub->add_option("--image", ea.images, "PNG path (repeatable, paired with --caption)");
        sub->add_option("--caption", ea.captions, "Caption (repeatable)");
        sub->add_option("--limit", ea.limit, "Use only the first N records");
        sub->add_option("--out", ea.out, "CSV report path")->required();
    };
    auto* sc = app.add_subcommand("score", "Cosine alignment score per image-caption pair");
    add_inputs(sc);
    auto* at = app.add_subcommand("attack", "Score under a PGD attack on the score");
    add_inputs(at);
    at->add_option("--eps", ea.eps, "Radius; fractions such as 2/255 accepted")->capture_default_str();
    at->add_option("--alpha1", ea.alpha1, "Step size (Linf: in units of eps)")->capture_default_str();
    at->add_option("--steps", ea.steps, "PGD iterations")->capture_default_str();
    at->add_option("--norm", ea.norm, "linf or l2")->capture_default_str();
    at->add_option("--direction", ea.direction, "increase or decrease")->capture_default_str();
    auto* bl = app.add_subcommand("blend", "Score against lambda * x + (1 - lambda) * noise");
    bl->alias("blend-curve");
    add_inputs(bl);
    bl->add_option("--lambdas", ea.lambdas, "start:stop:step or comma list")->capture_default_str();
    bl->add_option("--seed", ea.seed, "Noise seed")->capture_default_str();

    DenoiserArgs dn;
    auto* td = app.add_subcommand("train-denoiser", "Train the toy unconditional diffusion model");
    td->add_option("--data", dn.data, "Dataset directory")->required();
    td->add_option("--out", dn.out, "Checkpoint path")->required();
    td->add_option("--steps", dn.cfg.steps, "Optimizer steps")->capture_default_str();
    td->add_option("--batch", dn.cfg.batch, "Batch size")->capture_default_str();
    td->add_option("--lr", dn.cfg.lr, "Peak learning rate")->capture_default_str();
    td->add_option("--timesteps", dn.cfg.timesteps, "Diffusion timesteps")->capture_default_str();
    td->add_option("--width", dn.cfg.model.width, "Full-resolution channels")->capture_default_str();
    td->add_option("--width-low", dn.cfg.model.width_low, "Half-resolution channels")->capture_default_str();
    td->add_option("--seed", dn.cfg.seed, "Seed")->capture_default_str();
    td->add_option("--log-every", dn.log_every, "Progress line interval")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return 0;
    } catch (const CLI::CallForHelp&) {
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        out << sub->help();
        return 0;
    } catch (const CLI::Success&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << '\n';
        return 2;
    }

    try {
        if (make->parsed()) {
            return cmd_make_dataset(md, args, out);
        }
        if (train->parsed()) {
            auto flag = [&](const std::string& key, const std::string& v) {
                if (!v.empty()) {
                    ta.flags[key] = v;
                }
            };
            flag("train.steps", t_steps);
            flag("train.gamma", t_gamma);
            flag("train.lr", t_lr);
            flag("train.ablation", t_ablation);
            flag("train.seed", t_seed);
            flag("train.batch_disc", t_bd);
            flag("train.batch_gen", t_bg);
            flag("train.warmup_steps", t_warmup);
            flag("train.checkpoint_every", t_ckpt);
            return cmd_train(ta, args, out);
        }
        if (gen->parsed()) {
            return cmd_generate(ga, args, out);
        }
        if (guide->parsed()) {
            return cmd_guide(ua, true, args, out);
        }
        if (ddim->parsed()) {
            return cmd_guide(da, false, args, out);
        }
        if (sc->parsed()) {
            return cmd_score(ea, args, out);
        }
        if (at->parsed()) {
            return cmd_attack(ea, args, out);
        }
        if (bl->parsed()) {
            return cmd_blend(ea, args, out);
        }
        if (td->parsed()) {
            return cmd_train_denoiser(dn, args, out);
        }
    } catch (const ConfigError& e) {
        err << "error: " << e.kind() << ": " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.kind() << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: runtime: " << e.what() << '\n';
        return 1;
    }
    err << "error: usage: no subcommand\n";
    return 2;
}

}  // namespace jem

#include "trebi/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "trebi/errors.hpp"
#include "trebi/oracle.hpp"
#include "trebi/trajectory.hpp"
#include "trebi/util.hpp"

namespace trebi::harness {

using nlohmann::json;

namespace {

// Reads one object section, rejecting keys the caller did not consume.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw FormatError("config section '" + name_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& ex) {
            throw FormatError("config " + name_ + "." + key + ": " + ex.what());
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw FormatError("unknown config key '" + (name_.empty() ? "" : name_ + ".") + item.key() + "'");
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

diffusion::ReverseVariance variance_from_string(const std::string& s) {
    if (s == "beta") return diffusion::ReverseVariance::kBeta;
    if (s == "posterior") return diffusion::ReverseVariance::kPosterior;
    throw FormatError("model.reverse_variance must be 'beta' or 'posterior', got '" + s + "'");
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        if (k) s += ';';
        s += std::to_string(seeds[k]);
    }
    return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    for (std::string_view line : split(text, '\n')) {
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

double parse_double(std::string_view s) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw FormatError("bad number '" + std::string(s) + "'");
    return v;
}

template <class Int>
Int parse_int(std::string_view s) {
    Int v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw FormatError("bad integer '" + std::string(s) + "'");
    return v;
}

std::string to_text(const diffusion::DiffusionModel& model) {
    std::ostringstream out;
    model.save(out);
    return out.str();
}

std::string to_text(const guide::GuidePair& guides) {
    std::ostringstream out;
    guides.save(out);
    return out.str();
}

json step_json(const planner::StepLog& s) {
    json j;
    j["t"] = s.t;
    j["z"] = s.z;
    j["replanned"] = s.replanned;
    j["reward_hat"] = s.reward_hat;
    j["cost_hat"] = s.cost_hat;
    j["fallback"] = s.fallback;
    j["action"] = std::vector<double>(s.action.data(), s.action.data() + s.action.size());
    j["r"] = s.r;
    j["c"] = s.c;
    if (s.replanned) j["unsafe_by_step"] = s.unsafe_by_step;
    return j;
}

std::string episode_log_line(std::string_view planner_name, std::optional<double> ratio, std::uint64_t seed,
                             int episode, double gamma, const planner::EpisodeResult& res) {
    json j;
    j["planner"] = planner_name;
    j["ratio"] = ratio ? json(*ratio) : json(nullptr);
    j["seed"] = seed;
    j["episode"] = episode;
    j["budget"] = std::isfinite(res.budget) ? json(res.budget) : json(nullptr);
    j["gamma"] = gamma;
    j["reward"] = res.reward;
    j["cost"] = res.cost;
    json steps = json::array();
    for (const auto& s : res.steps) steps.push_back(step_json(s));
    j["steps"] = std::move(steps);
    return j.dump() + '\n';
}

}  // namespace

// ---- config ----

void ExperimentConfig::validate() const {
    if (env.empty()) throw FormatError("config: env is required");
    if (dataset.path.empty() && dataset.episodes < 1) throw FormatError("config: dataset.episodes must be >= 1");
    if (model.horizon < 1 || model.diffusion_steps < 1 || model.epochs < 1 || model.batch_size < 1)
        throw FormatError("config: model horizon, diffusion_steps, epochs and batch_size must be >= 1");
    if (model.hidden.empty() || guides.hidden.empty()) throw FormatError("config: hidden layer lists must be nonempty");
    variance_from_string(model.reverse_variance);
    if (guides.epochs < 1 || guides.batch_size < 1) throw FormatError("config: guide epochs and batch_size must be >= 1");
    if (!(guides.clean_fraction >= 0.0 && guides.clean_fraction <= 1.0))
        throw FormatError("config: guides.clean_fraction must lie in [0,1]");
    if (sweep.budget_ratios.empty()) throw FormatError("config: sweep.budget_ratios is empty");
    for (double r : sweep.budget_ratios)
        if (!(r > 0.0 && r <= 1.0)) throw FormatError("config: budget ratio " + format_double(r) + " is outside (0,1]");
    if (sweep.episodes < 1) throw FormatError("config: sweep.episodes must be >= 1");
    if (sweep.seeds.empty()) throw FormatError("config: sweep.seeds is empty");
    if (sweep.b_max && !(*sweep.b_max > 0.0)) throw FormatError("config: sweep.b_max must be positive");
    if (sweep.calibration_episodes < 1) throw FormatError("config: sweep.calibration_episodes must be >= 1");
    if (sweep.threads < 1) throw FormatError("config: sweep.threads must be >= 1");
    if (!(oracle.delta > 0.0 && oracle.delta < 1.0)) throw FormatError("config: oracle.delta must lie in (0,1)");
    try {
        planner_config().validate();
    } catch (const std::invalid_argument& ex) {
        throw FormatError(std::string("config planner: ") + ex.what());
    }
}

std::filesystem::path ExperimentConfig::artifact_dir() const {
    return artifacts.empty() ? std::filesystem::path(out) / "artifacts" : std::filesystem::path(artifacts);
}

std::uint64_t ExperimentConfig::hash() const {
    json j = to_json(*this);
    j.erase("out");
    j.erase("artifacts");
    return fnv1a(j.dump());
}

std::uint64_t ExperimentConfig::training_hash() const {
    const json full = to_json(*this);
    json j;
    for (const char* key : {"env", "seed", "dataset", "model", "guides"}) j[key] = full.at(key);
    return fnv1a(j.dump());
}

planner::PlannerConfig ExperimentConfig::planner_config() const {
    planner::PlannerConfig pc;
    pc.candidates = planner.candidates;
    pc.replan_interval = planner.replan_interval;
    pc.guide.alpha = planner.alpha;
    pc.guide.n = planner.n;
    pc.seed = seed;
    return pc;
}

ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    Section top(j, "");
    top.get("env", c.env);
    top.get("seed", c.seed);
    top.get("out", c.out);
    top.get("artifacts", c.artifacts);
    if (const json* d = top.child("dataset")) {
        Section s(*d, "dataset");
        s.get("path", c.dataset.path);
        s.get("episodes", c.dataset.episodes);
        s.finish();
    }
    if (const json* d = top.child("model")) {
        Section s(*d, "model");
        s.get("horizon", c.model.horizon);
        s.get("diffusion_steps", c.model.diffusion_steps);
        s.get("hidden", c.model.hidden);
        s.get("embed_dims", c.model.embed_dims);
        s.get("reverse_variance", c.model.reverse_variance);
        s.get("epochs", c.model.epochs);
        s.get("batch_size", c.model.batch_size);
        s.get("learning_rate", c.model.learning_rate);
        s.get("final_lr_fraction", c.model.final_lr_fraction);
        s.finish();
    }
    if (const json* d = top.child("guides")) {
        Section s(*d, "guides");
        s.get("hidden", c.guides.hidden);
        s.get("epochs", c.guides.epochs);
        s.get("batch_size", c.guides.batch_size);
        s.get("learning_rate", c.guides.learning_rate);
        s.get("final_lr_fraction", c.guides.final_lr_fraction);
        s.get("clean_fraction", c.guides.clean_fraction);
        s.finish();
    }
    if (const json* d = top.child("planner")) {
        Section s(*d, "planner");
        s.get("candidates", c.planner.candidates);
        s.get("replan_interval", c.planner.replan_interval);
        s.get("alpha", c.planner.alpha);
        s.get("n", c.planner.n);
        s.finish();
    }
    if (const json* d = top.child("sweep")) {
        Section s(*d, "sweep");
        s.get("budget_ratios", c.sweep.budget_ratios);
        s.get("episodes", c.sweep.episodes);
        s.get("seeds", c.sweep.seeds);
        if (const json* b = s.child("b_max"); b && !b->is_null()) {
            if (!b->is_number()) throw FormatError("config sweep.b_max must be a number or null");
            c.sweep.b_max = b->get<double>();
        }
        s.get("calibration_episodes", c.sweep.calibration_episodes);
        s.get("threads", c.sweep.threads);
        s.finish();
    }
    if (const json* d = top.child("oracle")) {
        Section s(*d, "oracle");
        s.get("episodes", c.oracle.episodes);
        s.get("budget_fractions", c.oracle.budget_fractions);
        s.get("alpha", c.oracle.alpha);
        s.get("penalties", c.oracle.penalties);
        s.get("delta", c.oracle.delta);
        s.get("cost_noise", c.oracle.cost_noise);
        s.get("cost_trials", c.oracle.cost_trials);
        s.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& ex) {
        throw FormatError("config " + path.string() + ": " + ex.what());
    }
    return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["env"] = c.env;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["artifacts"] = c.artifacts;
    j["dataset"] = {{"path", c.dataset.path}, {"episodes", c.dataset.episodes}};
    j["model"] = {{"horizon", c.model.horizon},
                  {"diffusion_steps", c.model.diffusion_steps},
                  {"hidden", c.model.hidden},
                  {"embed_dims", c.model.embed_dims},
                  {"reverse_variance", c.model.reverse_variance},
                  {"epochs", c.model.epochs},
                  {"batch_size", c.model.batch_size},
                  {"learning_rate", c.model.learning_rate},
                  {"final_lr_fraction", c.model.final_lr_fraction}};
    j["guides"] = {{"hidden", c.guides.hidden},
                   {"epochs", c.guides.epochs},
                   {"batch_size", c.guides.batch_size},
                   {"learning_rate", c.guides.learning_rate},
                   {"final_lr_fraction", c.guides.final_lr_fraction},
                   {"clean_fraction", c.guides.clean_fraction}};
    j["planner"] = {{"candidates", c.planner.candidates},
                    {"replan_interval", c.planner.replan_interval},
                    {"alpha", c.planner.alpha},
                    {"n", c.planner.n}};
    j["sweep"] = {{"budget_ratios", c.sweep.budget_ratios},
                  {"episodes", c.sweep.episodes},
                  {"seeds", c.sweep.seeds},
                  {"b_max", c.sweep.b_max ? json(*c.sweep.b_max) : json(nullptr)},
                  {"calibration_episodes", c.sweep.calibration_episodes},
                  {"threads", c.sweep.threads}};
    j["oracle"] = {{"episodes", c.oracle.episodes},
                   {"budget_fractions", c.oracle.budget_fractions},
                   {"alpha", c.oracle.alpha},
                   {"penalties", c.oracle.penalties},
                   {"delta", c.oracle.delta},
                   {"cost_noise", c.oracle.cost_noise},
                   {"cost_trials", c.oracle.cost_trials}};
    return j;
}

// ---- statistics ----

double quantile(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level outside [0,1]");
    std::sort(values.begin(), values.end());
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

BoxStats aggregate(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("cannot aggregate an empty sample");
    for (double v : values)
        if (!std::isfinite(v)) throw std::invalid_argument("cannot aggregate non-finite values");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    BoxStats b;
    b.count = static_cast<int>(sorted.size());
    b.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / b.count;
    b.median = quantile(sorted, 0.5);
    b.q1 = quantile(sorted, 0.25);
    b.q3 = quantile(sorted, 0.75);
    const double iqr = b.q3 - b.q1;
    const double lo_fence = b.q1 - 1.5 * iqr, hi_fence = b.q3 + 1.5 * iqr;
    b.whisker_lo = b.q1;
    b.whisker_hi = b.q3;
    for (double v : sorted) {
        if (v < lo_fence || v > hi_fence) {
            ++b.outliers;
            continue;
        }
        b.whisker_lo = std::min(b.whisker_lo, v);
        b.whisker_hi = std::max(b.whisker_hi, v);
    }
    return b;
}

// ---- exports ----

std::vector<SummaryRow> summarize(const ExperimentConfig& cfg, const std::vector<EpisodeRecord>& records) {
    if (records.empty()) throw std::invalid_argument("no episode records to summarize");
    const std::string seeds = join_seeds(cfg.sweep.seeds);
    const std::string hash = hex64(cfg.hash());
    std::vector<SummaryRow> rows;
    for (double ratio : cfg.sweep.budget_ratios) {
        std::vector<double> ncost, reward, viol;
        double budget = 0.0;
        for (const auto& r : records) {
            if (r.ratio != ratio) continue;
            budget = r.budget;
            ncost.push_back(r.normalized_cost());
            reward.push_back(r.reward);
            viol.push_back(r.violation ? 1.0 : 0.0);
        }
        if (ncost.empty()) continue;
        for (auto [name, vals] : {std::pair<const char*, std::vector<double>*>{"normalized_cost", &ncost},
                                  {"reward", &reward},
                                  {"violation", &viol}})
            rows.push_back({cfg.env, budget, ratio, name, aggregate(*vals), seeds, hash});
    }
    return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::string out(kSummaryHeader);
    out += '\n';
    for (const auto& r : rows) {
        const BoxStats& s = r.stats;
        out += r.env + ',' + format_double(r.budget) + ',' + format_double(r.ratio) + ',' + r.metric + ',' +
               std::to_string(s.count) + ',' + format_double(s.mean) + ',' + format_double(s.median) + ',' +
               format_double(s.q1) + ',' + format_double(s.q3) + ',' + format_double(s.whisker_lo) + ',' +
               format_double(s.whisker_hi) + ',' + std::to_string(s.outliers) + ',' + r.seed_set + ',' +
               r.config_hash + '\n';
    }
    return out;
}

std::vector<SummaryRow> parse_summary_csv(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty() || lines[0] != kSummaryHeader)
        throw FormatError("summary CSV header mismatch; expected: " + std::string(kSummaryHeader));
    std::vector<SummaryRow> rows;
    for (std::size_t k = 1; k < lines.size(); ++k) {
        const auto f = split(lines[k], ',');
        if (f.size() != 14) throw FormatError("summary CSV line " + std::to_string(k + 1) + " has the wrong field count");
        SummaryRow r;
        r.env = f[0];
        r.budget = parse_double(f[1]);
        r.ratio = parse_double(f[2]);
        r.metric = f[3];
        r.stats.count = parse_int<int>(f[4]);
        r.stats.mean = parse_double(f[5]);
        r.stats.median = parse_double(f[6]);
        r.stats.q1 = parse_double(f[7]);
        r.stats.q3 = parse_double(f[8]);
        r.stats.whisker_lo = parse_double(f[9]);
        r.stats.whisker_hi = parse_double(f[10]);
        r.stats.outliers = parse_int<int>(f[11]);
        r.seed_set = f[12];
        r.config_hash = f[13];
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string episodes_csv(const std::string& env, const std::vector<EpisodeRecord>& records) {
    std::string out(kEpisodeHeader);
    out += '\n';
    for (const auto& r : records)
        out += r.planner + ',' + env + ',' + format_double(r.ratio) + ',' + format_double(r.budget) + ',' +
               std::to_string(r.seed) + ',' + std::to_string(r.episode) + ',' + format_double(r.reward) + ',' +
               format_double(r.cost) + ',' + format_double(r.normalized_cost()) + ',' + (r.violation ? "1" : "0") +
               '\n';
    return out;
}

std::vector<EpisodeRecord> parse_episodes_csv(std::string_view text) {
    const auto lines = lines_of(text);
    if (lines.empty() || lines[0] != kEpisodeHeader)
        throw FormatError("episode CSV header mismatch; expected: " + std::string(kEpisodeHeader));
    std::vector<EpisodeRecord> out;
    for (std::size_t k = 1; k < lines.size(); ++k) {
        const auto f = split(lines[k], ',');
        if (f.size() != 10) throw FormatError("episode CSV line " + std::to_string(k + 1) + " has the wrong field count");
        EpisodeRecord r;
        r.planner = f[0];
        r.ratio = parse_double(f[2]);
        r.budget = parse_double(f[3]);
        r.seed = parse_int<std::uint64_t>(f[4]);
        r.episode = parse_int<int>(f[5]);
        r.reward = parse_double(f[6]);
        r.cost = parse_double(f[7]);
        r.violation = f[9] == "1";
        out.push_back(std::move(r));
    }
    return out;
}

// ---- pipeline ----

Artifacts artifact_paths(const ExperimentConfig& cfg) {
    const auto dir = cfg.artifact_dir();
    const std::string h = hex64(cfg.training_hash());
    Artifacts a;
    a.dataset = cfg.dataset.path.empty() ? dir / ("dataset_" + h + ".txt") : std::filesystem::path(cfg.dataset.path);
    a.model = dir / ("model_" + h + ".txt");
    a.guides = dir / ("guides_" + h + ".txt");
    json cal;
    cal["training"] = hex64(cfg.training_hash());
    cal["planner"] = to_json(cfg).at("planner");
    cal["episodes"] = cfg.sweep.calibration_episodes;
    a.calibration = dir / ("calibration_" + hex64(fnv1a(cal.dump())) + ".json");
    return a;
}

cmdp::Dataset collect(const ExperimentConfig& cfg) {
    auto env = cmdp::make_env(cfg.env);
    auto behavior = cmdp::make_behavior(cfg.env, *env);
    Rng rng(mix_seed(cfg.seed, 1));
    return cmdp::collect_dataset(*env, *behavior, cfg.dataset.episodes, rng);
}

void train(const ExperimentConfig& cfg, std::ostream* progress) {
    const Artifacts paths = artifact_paths(cfg);
    auto env = cmdp::make_env(cfg.env);
    cmdp::Dataset data;
    if (std::filesystem::exists(paths.dataset)) {
        data = cmdp::load_dataset(paths.dataset);
        if (data.spec_hash != env->spec().hash())
            throw FormatError("dataset " + paths.dataset.string() + " was collected on a different environment");
    } else {
        if (!cfg.dataset.path.empty()) throw FormatError("dataset file not found: " + cfg.dataset.path);
        data = collect(cfg);
        cmdp::save_dataset(data, paths.dataset);
        if (progress) *progress << "collected " << data.episodes.size() << " episodes -> " << paths.dataset.string() << '\n';
    }

    const traj::Encoder encoder(env->spec());
    const traj::TrajectoryNormalizer normalizer = traj::fit_normalizer(data, encoder);
    const auto windows = traj::make_windows(data, encoder, cfg.model.horizon, env->spec().gamma);
    const traj::Layout layout{cfg.model.horizon, encoder.state_features(), encoder.action_features()};

    Rng rng(mix_seed(cfg.seed, 2));
    diffusion::DenoiserConfig dcfg;
    dcfg.hidden = cfg.model.hidden;
    dcfg.embed_dims = cfg.model.embed_dims;
    diffusion::DiffusionModel model(
        env->spec(), layout,
        diffusion::NoiseSchedule::cosine(cfg.model.diffusion_steps, variance_from_string(cfg.model.reverse_variance)),
        normalizer, dcfg, rng);
    const Eigen::MatrixXd w = diffusion::window_matrix(windows, normalizer);
    const auto losses = diffusion::train(model,
                                         w,
                                         {.epochs = cfg.model.epochs,
                                          .batch_size = cfg.model.batch_size,
                                          .learning_rate = cfg.model.learning_rate,
                                          .final_lr_fraction = cfg.model.final_lr_fraction},
                                         rng);
    write_file_atomic(paths.model, to_text(model));
    if (progress)
        *progress << "denoiser: " << windows.size() << " windows, final loss " << losses.back() << " -> "
                  << paths.model.string() << '\n';

    guide::GuideNetConfig gcfg;
    gcfg.hidden = cfg.guides.hidden;
    guide::GuidePair guides(model, gcfg, rng);
    const auto curves = guide::train_guides(guides, windows, normalizer, model.schedule(),
                                            {.epochs = cfg.guides.epochs,
                                             .batch_size = cfg.guides.batch_size,
                                             .learning_rate = cfg.guides.learning_rate,
                                             .final_lr_fraction = cfg.guides.final_lr_fraction,
                                             .clean_fraction = cfg.guides.clean_fraction},
                                            rng);
    write_file_atomic(paths.guides, to_text(guides));
    if (progress)
        *progress << "guides: final reward loss " << curves.reward.back() << ", cost loss " << curves.cost.back()
                  << " -> " << paths.guides.string() << '\n';
}

Trained load_trained(const ExperimentConfig& cfg, std::string_view config_path) {
    const Artifacts paths = artifact_paths(cfg);
    for (const auto& p : {paths.model, paths.guides})
        if (!std::filesystem::exists(p))
            throw FormatError("missing trained artifact " + p.string() + "; run `trebi train --config " +
                              std::string(config_path) + "` first");
    Trained t;
    t.env = cmdp::make_env(cfg.env);
    {
        std::istringstream in(read_file(paths.model));
        t.model = diffusion::DiffusionModel::load(in);
    }
    {
        std::istringstream in(read_file(paths.guides));
        t.guides = guide::GuidePair::load(in);
    }
    if (t.model.spec_hash() != t.env->spec().hash())
        throw FormatError("model " + paths.model.string() + " was trained for a different environment");
    t.guides.check_compatible(t.model);
    return t;
}

std::uint64_t episode_seed(std::uint64_t seed, int episode) {
    return mix_seed(mix_seed(seed, 0x5eed), static_cast<std::uint64_t>(episode));
}

double calibrate_budget(const ExperimentConfig& cfg, const Trained& trained) {
    if (cfg.sweep.b_max) return *cfg.sweep.b_max;
    const Artifacts paths = artifact_paths(cfg);
    if (std::filesystem::exists(paths.calibration)) {
        const json j = json::parse(read_file(paths.calibration));
        return j.at("b_max").get<double>();
    }
    const planner::PlannerConfig pc = cfg.planner_config();
    const std::uint64_t base = mix_seed(cfg.seed, 0xca1b);
    double total = 0.0;
    for (int e = 0; e < cfg.sweep.calibration_episodes; ++e) {
        Rng rng(episode_seed(base, e));
        total += planner::run_episode(*trained.env, trained.model, trained.guides, planner::kUnconstrained, pc, rng,
                                      planner::PlannerKind::kUnconstrained)
                     .cost;
    }
    const double b_max = total / cfg.sweep.calibration_episodes;
    if (!(b_max > 0.0))
        throw InfeasibleBudget("unconstrained planner incurred no cost; set sweep.b_max explicitly");
    json j;
    j["b_max"] = b_max;
    j["episodes"] = cfg.sweep.calibration_episodes;
    j["env"] = cfg.env;
    write_file_atomic(paths.calibration, j.dump(2) + '\n');
    return b_max;
}

SweepResult run_sweep(const ExperimentConfig& cfg, const Trained& trained, const ProgressFn& progress) {
    cfg.validate();
    SweepResult out;
    out.b_max = calibrate_budget(cfg, trained);
    const planner::PlannerConfig pc = cfg.planner_config();
    const double gamma = trained.env->spec().gamma;

    // One cell per (planner, ratio, seed). The unconstrained planner ignores
    // the budget, so it runs once per seed and is scored against every ratio.
    struct Cell {
        planner::PlannerKind kind;
        std::optional<std::size_t> ratio;
        std::uint64_t seed;
        std::vector<planner::EpisodeResult> episodes;
        std::string log;
    };
    std::vector<Cell> cells;
    for (std::uint64_t seed : cfg.sweep.seeds) cells.push_back({planner::PlannerKind::kUnconstrained, {}, seed, {}, {}});
    for (std::size_t r = 0; r < cfg.sweep.budget_ratios.size(); ++r)
        for (std::uint64_t seed : cfg.sweep.seeds) cells.push_back({planner::PlannerKind::kTrebi, r, seed, {}, {}});

    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    std::size_t done = 0;
    auto worker = [&] {
        while (true) {
            const std::size_t k = next.fetch_add(1);
            if (k >= cells.size()) return;
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            Cell& cell = cells[k];
            try {
                const std::optional<double> ratio =
                    cell.ratio ? std::optional<double>(cfg.sweep.budget_ratios[*cell.ratio]) : std::nullopt;
                const double budget = ratio ? *ratio * out.b_max : planner::kUnconstrained;
                for (int e = 0; e < cfg.sweep.episodes; ++e) {
                    Rng rng(episode_seed(cell.seed, e));
                    auto res = planner::run_episode(*trained.env, trained.model, trained.guides, budget, pc, rng,
                                                    cell.kind);
                    cell.log += episode_log_line(planner::to_string(cell.kind), ratio, cell.seed, e, gamma, res);
                    res.steps.clear();
                    cell.episodes.push_back(std::move(res));
                }
                std::lock_guard lock(mu);
                ++done;
                if (progress) {
                    std::ostringstream msg;
                    msg << "cell " << done << '/' << cells.size() << ": " << planner::to_string(cell.kind);
                    if (ratio) msg << " ratio " << *ratio;
                    msg << " seed " << cell.seed;
                    progress(msg.str());
                }
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int threads = std::min<int>(cfg.sweep.threads, static_cast<int>(cells.size()));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    // single-threaded reduce in cell order
    for (const Cell& cell : cells) {
        out.step_log += cell.log;
        if (cell.kind == planner::PlannerKind::kUnconstrained) continue;
        const double ratio = cfg.sweep.budget_ratios[*cell.ratio];
        for (std::size_t e = 0; e < cell.episodes.size(); ++e) {
            const auto& res = cell.episodes[e];
            out.trebi.push_back({"trebi", ratio, res.budget, cell.seed, static_cast<int>(e), res.reward, res.cost,
                                 res.violation});
        }
    }
    for (double ratio : cfg.sweep.budget_ratios) {
        const double budget = ratio * out.b_max;
        for (const Cell& cell : cells) {
            if (cell.kind != planner::PlannerKind::kUnconstrained) continue;
            for (std::size_t e = 0; e < cell.episodes.size(); ++e) {
                const auto& res = cell.episodes[e];
                out.unconstrained.push_back({"unconstrained", ratio, budget, cell.seed, static_cast<int>(e),
                                             res.reward, res.cost, res.cost > budget});
            }
        }
    }
    return out;
}

void export_sweep(const ExperimentConfig& cfg, const SweepResult& result) {
    if (result.trebi.empty()) throw std::invalid_argument("sweep produced no episodes");
    const std::filesystem::path dir(cfg.out);
    const auto trebi_rows = summarize(cfg, result.trebi);
    const auto base_rows = summarize(cfg, result.unconstrained);
    write_file_atomic(dir / "summary_trebi.csv", summary_csv(trebi_rows));
    write_file_atomic(dir / "summary_unconstrained.csv", summary_csv(base_rows));
    std::vector<EpisodeRecord> all = result.trebi;
    all.insert(all.end(), result.unconstrained.begin(), result.unconstrained.end());
    write_file_atomic(dir / "episodes.csv", episodes_csv(cfg.env, all));
    write_file_atomic(dir / "steps.jsonl", result.step_log);

    auto rows_json = [](const std::vector<SummaryRow>& rows) {
        json arr = json::array();
        for (const auto& r : rows)
            arr.push_back({{"budget", r.budget},
                           {"ratio", r.ratio},
                           {"metric", r.metric},
                           {"count", r.stats.count},
                           {"mean", r.stats.mean},
                           {"median", r.stats.median},
                           {"q1", r.stats.q1},
                           {"q3", r.stats.q3},
                           {"whisker_lo", r.stats.whisker_lo},
                           {"whisker_hi", r.stats.whisker_hi},
                           {"outliers", r.stats.outliers}});
        return arr;
    };
    json j;
    j["schema_version"] = kSchemaVersion;
    j["config"] = to_json(cfg);
    j["config_hash"] = hex64(cfg.hash());
    j["training_hash"] = hex64(cfg.training_hash());
    j["seeds"] = cfg.sweep.seeds;
    j["b_max"] = result.b_max;
    j["summary_header"] = kSummaryHeader;
    j["episode_header"] = kEpisodeHeader;
    j["trebi"] = rows_json(trebi_rows);
    j["unconstrained"] = rows_json(base_rows);
    write_file_atomic(dir / "sweep.json", j.dump(2) + '\n');
}

// ---- oracle report ----

namespace {

double max_episode_cost(const cmdp::Dataset& data, double gamma) {
    double m = 0.0;
    for (const auto& ep : data.episodes) m = std::max(m, cmdp::episode_cost(ep, gamma));
    return m;
}

std::vector<double> start_vector(const oracle::Counts& counts) {
    std::vector<double> s(static_cast<std::size_t>(counts.num_states));
    for (int k = 0; k < counts.num_states; ++k) s[static_cast<std::size_t>(k)] = counts.start_prob(k);
    return s;
}

}  // namespace

json oracle_report(const ExperimentConfig& cfg) {
    const OracleSection& oc = cfg.oracle;
    json report;
    report["schema_version"] = kSchemaVersion;
    report["config_hash"] = hex64(cfg.hash());

    // q*_b, feasibility and the smoothing limit on the deterministic grid.
    {
        cmdp::GridBudget env;
        auto behavior = cmdp::make_behavior("grid_budget", env);
        Rng rng(mix_seed(cfg.seed, 11));
        const cmdp::Dataset data = cmdp::collect_dataset(env, *behavior, oc.episodes, rng);
        const oracle::TrajectoryTable table = oracle::enumerate(env, data);
        const double max_cost = max_episode_cost(data, env.spec().gamma);
        const auto p = table.probabilities();
        json budgets = json::array();
        for (double frac : oc.budget_fractions) {
            const double b = frac * max_cost;
            json jb;
            jb["fraction"] = frac;
            jb["budget"] = b;
            jb["safe_mass"] = oracle::safe_mass(table, b);
            try {
                const auto q = oracle::optimal_q(table, b, oc.alpha);
                jb["alpha"] = q.alpha;
                jb["log_z"] = q.log_z;
                jb["achieved_epsilon"] = q.epsilon;
                jb["feasible_at_achieved_epsilon"] = oracle::feasibility(table, b, q.epsilon);
                jb["expected_reward_q_star"] = oracle::expected_reward(table, q.q);
                jb["expected_reward_behavior"] = oracle::expected_reward(table, p);
                json smooth = json::array();
                for (double n : oc.penalties) {
                    const auto qs = oracle::smoothed_q(table, b, oc.alpha, n);
                    smooth.push_back({{"n", n},
                                      {"unsafe_mass", oracle::unsafe_mass(table, qs.q, b)},
                                      {"tv_to_q_star", oracle::total_variation(qs.q, q.q)}});
                }
                jb["smoothed"] = std::move(smooth);
            } catch (const InfeasibleBudget& ex) {
                jb["infeasible"] = ex.what();
            }
            budgets.push_back(std::move(jb));
        }
        report["grid_budget"] = {{"episodes", oc.episodes},
                                 {"trajectories", table.paths.size()},
                                 {"max_observed_cost", max_cost},
                                 {"budgets", std::move(budgets)}};

        Rng trial_rng(mix_seed(cfg.seed, 12));
        const auto trials = oracle::cost_gap_trials(env, table, oc.cost_noise, oc.delta, oc.cost_trials, trial_rng);
        report["cost_gap"] = {{"trials", trials.trials},
                              {"within_bound", trials.within},
                              {"fraction", trials.fraction()},
                              {"noise_std", trials.noise_std},
                              {"c_cost", trials.c_cost},
                              {"delta", oc.delta}};
    }

    // Reward-gap bound on the slip grid, and its data scaling.
    {
        auto env_ptr = cmdp::make_env("grid_budget_slip");
        const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
        auto behavior = cmdp::make_behavior("grid_budget_slip", env);
        Rng rng(mix_seed(cfg.seed, 13));
        const cmdp::Dataset data = cmdp::collect_dataset(env, *behavior, oc.episodes, rng);
        Rng rng2(mix_seed(cfg.seed, 14));
        const cmdp::Dataset doubled = cmdp::collect_dataset(env, *behavior, 2 * oc.episodes, rng2);
        const oracle::TrajectoryTable table = oracle::enumerate(env, data);
        const oracle::Counts& counts = table.counts;
        const oracle::Counts counts2 = oracle::Counts::from_dataset(doubled, env.spec());
        oracle::BoundInputs inputs = oracle::bound_inputs(table);
        inputs.delta = oc.delta;
        inputs.c_dynamics = oracle::fitted_dynamics_constant(env, counts);
        const double b = 0.5 * max_episode_cost(data, env.spec().gamma);
        const auto q = oracle::optimal_q(table, b, oc.alpha);
        const auto policy = oracle::TimePolicy::from_distribution(table, q.q);
        const auto start = start_vector(counts);
        const double j_q = oracle::expected_reward(table, q.q);
        const double j_true = oracle::exact_return(env, policy, start);
        const double j_fit = oracle::exact_return(env, counts, policy, start);
        const double bound = oracle::reward_gap_bound(env, counts, policy, inputs, q.epsilon);
        const auto behavior_policy = oracle::TimePolicy::behavior(counts, table.steps);
        const double u1 = oracle::uncertainty_term(env, counts, behavior_policy, inputs);
        const double u2 = oracle::uncertainty_term(env, counts2, oracle::TimePolicy::behavior(counts2, table.steps),
                                                   inputs);
        report["reward_gap"] = {{"budget", b},
                                {"c_dynamics", inputs.c_dynamics},
                                {"achieved_epsilon", q.epsilon},
                                {"j_q", j_q},
                                {"j_true", j_true},
                                {"j_fitted", j_fit},
                                {"gap", std::abs(j_q - j_true)},
                                {"bound", bound},
                                {"holds", std::abs(j_q - j_true) <= bound},
                                {"uncertainty", u1},
                                {"uncertainty_doubled", u2},
                                {"uncertainty_ratio", u1 / u2}};
    }
    return report;
}

}  // namespace trebi::harness

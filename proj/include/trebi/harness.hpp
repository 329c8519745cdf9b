#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "trebi/cmdp.hpp"
#include "trebi/diffusion.hpp"
#include "trebi/guide.hpp"
#include "trebi/planner.hpp"

namespace trebi::harness {

struct DatasetSection {
    std::string path;  // load this file instead of collecting when set
    int episodes = 1000;
};

struct ModelSection {
    int horizon = 16;
    int diffusion_steps = 64;
    std::vector<int> hidden{256, 256};
    int embed_dims = 16;
    std::string reverse_variance = "beta";
    int epochs = 50;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double final_lr_fraction = 0.1;
};

struct GuideSection {
    std::vector<int> hidden{128, 128};
    int epochs = 60;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double final_lr_fraction = 0.1;
    double clean_fraction = 0.5;
};

struct PlannerSection {
    int candidates = 16;
    int replan_interval = 1;
    double alpha = 0.1;
    double n = 100.0;
};

struct SweepSection {
    std::vector<double> budget_ratios{0.2, 0.4, 0.6, 0.8, 1.0};
    int episodes = 60;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::optional<double> b_max;  // calibrated from the unconstrained planner when unset
    int calibration_episodes = 60;
    int threads = 1;
};

struct OracleSection {
    int episodes = 500;                    // behavior episodes per GridBudget dataset
    std::vector<double> budget_fractions{0.25, 0.5, 0.75};  // of the max observed cost
    double alpha = 1.0;
    std::vector<double> penalties{0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0};
    double delta = 0.05;
    double cost_noise = 0.5;
    int cost_trials = 2000;
};

struct ExperimentConfig {
    std::string env = "reach_avoid";
    std::uint64_t seed = 0;
    DatasetSection dataset;
    ModelSection model;
    GuideSection guides;
    PlannerSection planner;
    SweepSection sweep;
    OracleSection oracle;
    std::string out = "runs/default";
    std::string artifacts;  // defaults to <out>/artifacts

    void validate() const;
    std::filesystem::path artifact_dir() const;
    // Fingerprint of everything except output locations.
    std::uint64_t hash() const;
    // Fingerprint of the sections that determine the trained artifacts.
    std::uint64_t training_hash() const;
    planner::PlannerConfig planner_config() const;
};

// Unknown keys anywhere are rejected with FormatError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Five-number summary with 1.5 IQR whiskers. Quartiles interpolate linearly
// between order statistics; whiskers sit on the most extreme data points
// inside the fences.
struct BoxStats {
    int count = 0;
    double mean = 0.0;
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double whisker_lo = 0.0;
    double whisker_hi = 0.0;
    int outliers = 0;

    bool operator==(const BoxStats&) const = default;
};

double quantile(std::vector<double> values, double p);
BoxStats aggregate(const std::vector<double>& values);

struct EpisodeRecord {
    std::string planner;
    double ratio = 0.0;
    double budget = 0.0;
    std::uint64_t seed = 0;
    int episode = 0;
    double reward = 0.0;
    double cost = 0.0;
    bool violation = false;

    double normalized_cost() const { return cost / budget; }
};

struct SummaryRow {
    std::string env;
    double budget = 0.0;
    double ratio = 0.0;
    std::string metric;  // normalized_cost | reward | violation
    BoxStats stats;
    std::string seed_set;
    std::string config_hash;

    bool operator==(const SummaryRow&) const = default;
};

inline constexpr std::string_view kSummaryHeader =
    "env,budget,ratio,metric,count,mean,median,q1,q3,whisker_lo,whisker_hi,outliers,seed_set,config_hash";
inline constexpr std::string_view kEpisodeHeader =
    "planner,env,ratio,budget,seed,episode,reward,cost,normalized_cost,violation";
inline constexpr int kSchemaVersion = 1;

std::vector<SummaryRow> summarize(const ExperimentConfig& cfg, const std::vector<EpisodeRecord>& records);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_summary_csv(std::string_view text);
std::string episodes_csv(const std::string& env, const std::vector<EpisodeRecord>& records);
std::vector<EpisodeRecord> parse_episodes_csv(std::string_view text);

// Trained pipeline pieces for one config.
struct Artifacts {
    std::filesystem::path dataset;
    std::filesystem::path model;
    std::filesystem::path guides;
    std::filesystem::path calibration;
};
Artifacts artifact_paths(const ExperimentConfig& cfg);

cmdp::Dataset collect(const ExperimentConfig& cfg);
// Collects (or loads) the dataset if needed, then trains and stores the model and guides.
void train(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

struct Trained {
    std::unique_ptr<cmdp::Env> env;
    diffusion::DiffusionModel model;
    guide::GuidePair guides;
};
// Throws FormatError naming the train command when artifacts are missing.
Trained load_trained(const ExperimentConfig& cfg, std::string_view config_path = "<config>");

// Episode seeds are shared across ratios and planners (common random numbers).
std::uint64_t episode_seed(std::uint64_t seed, int episode);

// Mean episodic cost of the unconstrained guided planner, cached next to the artifacts.
double calibrate_budget(const ExperimentConfig& cfg, const Trained& trained);

struct SweepResult {
    double b_max = 0.0;
    std::vector<EpisodeRecord> trebi;
    std::vector<EpisodeRecord> unconstrained;
    // One JSON object per line: planner, ratio, seed, episode, budget, gamma and steps.
    std::string step_log;
};

using ProgressFn = std::function<void(std::string_view)>;
SweepResult run_sweep(const ExperimentConfig& cfg, const Trained& trained, const ProgressFn& progress = {});

// Writes summary_trebi.csv, summary_unconstrained.csv, episodes.csv, steps.jsonl and sweep.json into cfg.out.
void export_sweep(const ExperimentConfig& cfg, const SweepResult& result);

// Exact GridBudget checks: q*_b, feasibility, smoothing limit and bound evaluations.
nlohmann::json oracle_report(const ExperimentConfig& cfg);

}  // namespace trebi::harness

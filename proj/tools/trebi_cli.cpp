#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "trebi/errors.hpp"
#include "trebi/harness.hpp"
#include "trebi/planner.hpp"
#include "trebi/util.hpp"

using namespace trebi;

namespace {

struct Overrides {
    std::string config;
    std::vector<double> ratios;
    int episodes = 0;
    std::vector<std::uint64_t> seeds;
    int candidates = 0;
    double alpha = 0.0;
    double n = 0.0;
    int replan_interval = 0;
    std::string out;
};

harness::ExperimentConfig resolve(const Overrides& o) {
    harness::ExperimentConfig cfg =
        o.config.empty() ? harness::ExperimentConfig{} : harness::load_config(o.config);
    if (!o.ratios.empty()) cfg.sweep.budget_ratios = o.ratios;
    if (o.episodes > 0) cfg.sweep.episodes = o.episodes;
    if (!o.seeds.empty()) cfg.sweep.seeds = o.seeds;
    if (o.candidates > 0) cfg.planner.candidates = o.candidates;
    if (o.alpha > 0.0) cfg.planner.alpha = o.alpha;
    if (o.n > 0.0) cfg.planner.n = o.n;
    if (o.replan_interval > 0) cfg.planner.replan_interval = o.replan_interval;
    if (!o.out.empty()) cfg.out = o.out;
    cfg.validate();
    return cfg;
}

void print_summary(const std::string& title, const std::vector<harness::SummaryRow>& rows) {
    std::cout << title << '\n';
    std::cout << std::left << std::setw(8) << "ratio" << std::setw(10) << "budget" << std::setw(17) << "metric"
              << std::right << std::setw(7) << "count" << std::setw(11) << "mean" << std::setw(11) << "median"
              << std::setw(11) << "q1" << std::setw(11) << "q3" << std::setw(9) << "outl" << '\n';
    std::cout << std::fixed << std::setprecision(4);
    for (const auto& r : rows)
        std::cout << std::left << std::setw(8) << r.ratio << std::setw(10) << r.budget << std::setw(17) << r.metric
                  << std::right << std::setw(7) << r.stats.count << std::setw(11) << r.stats.mean << std::setw(11)
                  << r.stats.median << std::setw(11) << r.stats.q1 << std::setw(11) << r.stats.q3 << std::setw(9)
                  << r.stats.outliers << '\n';
    std::cout << std::defaultfloat;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Budget-conditioned diffusion planning over offline CMDP data"};
    app.require_subcommand(1);
    app.fallthrough();

    Overrides o;
    app.add_option("--config", o.config, "experiment config (JSON)");
    app.add_option("--budget-ratios", o.ratios, "budget ratios in (0,1]")->delimiter(',');
    app.add_option("--episodes", o.episodes, "episodes per budget and seed");
    app.add_option("--seeds", o.seeds, "evaluation seeds")->delimiter(',');
    app.add_option("--candidates", o.candidates, "candidate trajectories per plan");
    app.add_option("--alpha", o.alpha, "guidance scale");
    app.add_option("--n", o.n, "budget overshoot penalty");
    app.add_option("--replan-interval", o.replan_interval, "env steps between replans");
    app.add_option("--out", o.out, "output directory");

    auto* collect = app.add_subcommand("collect", "collect the behavior dataset");
    auto* train = app.add_subcommand("train", "train the diffusion model and guides");
    auto* plan = app.add_subcommand("plan", "run planner episodes at one budget");
    double budget = 0.0, ratio = 1.0;
    std::string kind = "trebi", log_path;
    plan->add_option("--budget", budget, "absolute budget; overrides --ratio");
    plan->add_option("--ratio", ratio, "budget as a fraction of b_max")->check(CLI::Range(0.0, 1.0));
    plan->add_option("--planner", kind, "trebi | unconstrained | behavior");
    plan->add_option("--log", log_path, "write per-step JSON lines here");
    auto* sweep = app.add_subcommand("sweep", "budget sweep with box statistics and CSV export");
    auto* oracle = app.add_subcommand("oracle", "exact GridBudget checks, written as JSON");
    auto* report = app.add_subcommand("report", "print the summaries of a finished sweep");

    CLI11_PARSE(app, argc, argv);

    const std::string config_name = o.config.empty() ? "<config>" : o.config;
    try {
        const harness::ExperimentConfig cfg = resolve(o);
        if (*collect) {
            const auto paths = harness::artifact_paths(cfg);
            const auto data = harness::collect(cfg);
            cmdp::save_dataset(data, paths.dataset);
            std::cout << "wrote " << data.episodes.size() << " episodes to " << paths.dataset.string() << '\n';
        } else if (*train) {
            harness::train(cfg, &std::cout);
        } else if (*plan) {
            const auto trained = harness::load_trained(cfg, config_name);
            const auto planner_kind = planner::planner_kind_from_string(kind);
            const double b = budget > 0.0 ? budget : ratio * harness::calibrate_budget(cfg, trained);
            const auto pc = cfg.planner_config();
            std::ofstream log;
            if (!log_path.empty()) {
                log.open(log_path);
                if (!log) throw FormatError("cannot write " + log_path);
            }
            const int episodes = o.episodes > 0 ? o.episodes : 1;
            for (int e = 0; e < episodes; ++e) {
                Rng rng(harness::episode_seed(cfg.seed, e));
                const auto res = planner::run_episode(*trained.env, trained.model, trained.guides,
                                                      planner_kind == planner::PlannerKind::kTrebi
                                                          ? b
                                                          : planner::kUnconstrained,
                                                      pc, rng, planner_kind);
                std::cout << "episode " << e << ": reward " << res.reward << " cost " << res.cost << " budget " << b
                          << (res.cost > b ? " VIOLATION" : "") << '\n';
                if (log) planner::write_step_log(log, res);
            }
        } else if (*sweep) {
            const auto trained = harness::load_trained(cfg, config_name);
            const auto result = harness::run_sweep(cfg, trained, [](std::string_view msg) {
                std::cout << msg << std::endl;
            });
            harness::export_sweep(cfg, result);
            std::cout << "b_max " << result.b_max << "; wrote " << cfg.out << "/summary_trebi.csv\n";
        } else if (*oracle) {
            const auto j = harness::oracle_report(cfg);
            const auto path = std::filesystem::path(cfg.out) / "oracle_report.json";
            write_file_atomic(path, j.dump(2) + '\n');
            std::cout << "wrote " << path.string() << '\n';
        } else if (*report) {
            const std::filesystem::path dir(cfg.out);
            for (const char* name : {"summary_trebi.csv", "summary_unconstrained.csv"}) {
                const auto path = dir / name;
                if (!std::filesystem::exists(path))
                    throw FormatError("no " + path.string() + "; run `trebi sweep --config " + config_name +
                                      "` first");
                print_summary(name, harness::parse_summary_csv(read_file(path)));
            }
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
    return 0;
}

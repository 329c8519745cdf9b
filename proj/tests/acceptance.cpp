// Acceptance run: each criterion prints one "criterion k: PASS|FAIL ..." line.
// Exits non-zero if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "trebi/guide.hpp"
#include "trebi/harness.hpp"
#include "trebi/oracle.hpp"
#include "trebi/trajectory.hpp"
#include "trebi/util.hpp"

using namespace trebi;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int failures = 0;

void report(int k, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << "criterion " << k << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

double max_episode_cost(const cmdp::Dataset& data, double gamma) {
    double m = 0.0;
    for (const auto& ep : data.episodes) m = std::max(m, cmdp::episode_cost(ep, gamma));
    return m;
}

std::vector<double> start_vector(const oracle::Counts& c) {
    std::vector<double> s(static_cast<std::size_t>(c.num_states));
    for (int k = 0; k < c.num_states; ++k) s[static_cast<std::size_t>(k)] = c.start_prob(k);
    return s;
}

struct GridInstance {
    cmdp::GridBudget env;
    oracle::TrajectoryTable table;
    double budget = 0.0;
};

GridInstance grid_instance(const harness::ExperimentConfig& cfg) {
    GridInstance g;
    auto behavior = cmdp::make_behavior("grid_budget", g.env);
    Rng rng(mix_seed(cfg.seed, 11));
    const auto data = cmdp::collect_dataset(g.env, *behavior, cfg.oracle.episodes, rng);
    g.table = oracle::enumerate(g.env, data);
    g.budget = 0.5 * max_episode_cost(data, g.env.spec().gamma);
    return g;
}

void criterion1(const harness::ExperimentConfig& cfg, const GridInstance& g) {
    Stopwatch sw;
    const double alpha = cfg.oracle.alpha;
    const auto q = oracle::optimal_q(g.table, g.budget, alpha);
    const double best = oracle::expected_reward(g.table, q.q);
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t k = 0; k < q.q.size(); ++k) {
        const auto& p = g.table.paths[k];
        if (p.cost > g.budget) continue;
        const double v = std::log(q.q[k]) - std::log(p.prob) - alpha * p.reward;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Rng rng(mix_seed(cfg.seed, 21));
    const auto p = g.table.probabilities();
    double worst = -INFINITY;
    bool all_feasible = true;
    for (int trial = 0; trial < 10000; ++trial) {
        const auto r = oracle::random_feasible_q(g.table, g.budget, q.epsilon, rng);
        all_feasible = all_feasible && oracle::unsafe_mass(g.table, r, g.budget) == 0.0 &&
                       oracle::kl_divergence(r, p) <= q.epsilon + 1e-12;
        worst = std::max(worst, oracle::expected_reward(g.table, r) - best);
    }
    const double secs = sw.seconds();
    report(1, worst <= 1e-9 && hi - lo <= 1e-9 && all_feasible && secs < 60.0,
           "b=" + fmt(g.budget) + " trajectories=" + std::to_string(g.table.paths.size()) +
               " max(E_q[R]-E_q*[R])=" + fmt(worst) + " kkt_spread=" + fmt(hi - lo) +
               " feasible_samples=" + (all_feasible ? "yes" : "no") + " time=" + fmt(secs, 3) + "s");
}

void criterion2(const harness::ExperimentConfig& cfg, const GridInstance& g) {
    Stopwatch sw;
    const auto hard = oracle::optimal_q(g.table, g.budget, cfg.oracle.alpha);
    const std::vector<double> penalties{0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0};
    double prev = INFINITY, last_unsafe = 0.0, last_tv = 0.0;
    bool monotone = true;
    std::string trace;
    for (double n : penalties) {
        const auto q = oracle::smoothed_q(g.table, g.budget, cfg.oracle.alpha, n);
        const double u = oracle::unsafe_mass(g.table, q.q, g.budget);
        monotone = monotone && u <= prev;
        prev = u;
        last_unsafe = u;
        last_tv = oracle::total_variation(q.q, hard.q);
        trace += (trace.empty() ? "" : ",") + fmt(u, 3);
    }
    const double secs = sw.seconds();
    report(2, monotone && last_unsafe < 1e-3 && last_tv < 1e-3 && secs < 60.0,
           "unsafe_mass=[" + trace + "] tv(1e4)=" + fmt(last_tv) + " time=" + fmt(secs, 3) + "s");
}

void criterion3(const harness::ExperimentConfig& cfg) {
    Stopwatch sw;
    auto env_ptr = cmdp::make_env("grid_budget_slip");
    const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
    auto behavior = cmdp::make_behavior("grid_budget_slip", env);
    Rng rng(mix_seed(cfg.seed, 13));
    const auto data = cmdp::collect_dataset(env, *behavior, cfg.oracle.episodes, rng);
    Rng rng2(mix_seed(cfg.seed, 14));
    const auto doubled = cmdp::collect_dataset(env, *behavior, 2 * cfg.oracle.episodes, rng2);

    const auto table = oracle::enumerate(env, data);
    oracle::BoundInputs in = oracle::bound_inputs(table);
    in.delta = cfg.oracle.delta;
    in.c_dynamics = oracle::fitted_dynamics_constant(env, table.counts);
    const auto q = oracle::optimal_q(table, 0.5 * max_episode_cost(data, env.spec().gamma), cfg.oracle.alpha);
    const auto policy = oracle::TimePolicy::from_distribution(table, q.q);
    const double gap =
        std::abs(oracle::expected_reward(table, q.q) - oracle::exact_return(env, policy, start_vector(table.counts)));
    const double bound = oracle::reward_gap_bound(env, table.counts, policy, in, q.epsilon);

    // uncertainty term of the behavior policy, fitted separately on each dataset
    const auto counts2 = oracle::Counts::from_dataset(doubled, env.spec());
    const double u1 =
        oracle::uncertainty_term(env, table.counts, oracle::TimePolicy::behavior(table.counts, table.steps), in);
    const double u2 = oracle::uncertainty_term(env, counts2, oracle::TimePolicy::behavior(counts2, table.steps), in);
    const double ratio = u1 / u2;
    const bool scaling = std::abs(ratio - std::sqrt(2.0)) <= 0.1 * std::sqrt(2.0);

    GridInstance g = grid_instance(cfg);
    Rng trial_rng(mix_seed(cfg.seed, 12));
    const auto trials = oracle::cost_gap_trials(g.env, g.table, cfg.oracle.cost_noise, 0.05, 10000, trial_rng);
    const double secs = sw.seconds();
    report(3, gap <= bound && scaling && trials.fraction() >= 0.95 && secs < 300.0,
           "reward_gap=" + fmt(gap) + " bound=" + fmt(bound) + " C_T=" + fmt(in.c_dynamics) +
               " uncertainty_ratio=" + fmt(ratio) + " cost_gap_within=" + fmt(trials.fraction()) +
               " time=" + fmt(secs, 3) + "s");
}

void criterion4(const harness::ExperimentConfig& cfg, const harness::Trained& t, const Eigen::MatrixXd& windows) {
    Stopwatch sw;
    guide::GuideConfig gc{.alpha = cfg.planner.alpha, .n = cfg.planner.n};
    Rng rng(mix_seed(cfg.seed, 41));
    const int steps = t.model.schedule().steps();
    const double h = 1e-5;
    double worst = 0.0;
    int checked = 0;
    while (checked < 100) {
        const Eigen::VectorXd x0 = windows.col(rng.uniform_int(0, static_cast<int>(windows.cols()) - 1));
        const int i = rng.uniform_int(0, steps);
        const Eigen::VectorXd tau = i == 0 ? x0 : diffusion::add_noise(t.model.schedule(), x0, i, rng).tau_i;
        const double c = t.guides.evaluate(Eigen::MatrixXd(tau), i).cost[0];
        // half the points on each branch, at least 20% of the estimate away from the boundary
        const double b = checked % 2 ? 0.5 * c : 1.5 * c + 0.1;
        auto f = [&](const Eigen::VectorXd& x) {
            const auto v = t.guides.evaluate(Eigen::MatrixXd(x), i);
            return gc.alpha * guide::smoothed_objective(v.reward[0], v.cost[0], gc, b);
        };
        const Eigen::VectorXd g = guide::guidance_gradient(t.guides, tau, i, gc, b);
        Eigen::VectorXd fd(tau.size());
        for (Eigen::Index k = 0; k < tau.size(); ++k) {
            Eigen::VectorXd p = tau, m = tau;
            p[k] += h;
            m[k] -= h;
            fd[k] = (f(p) - f(m)) / (2 * h);
        }
        worst = std::max(worst, (g - fd).cwiseAbs().maxCoeff() / (1.0 + g.cwiseAbs().maxCoeff()));
        ++checked;
    }
    const double secs = sw.seconds();
    report(4, worst <= 1e-4 && secs < 60.0,
           "points=100 max|g-fd|/(1+|g|)=" + fmt(worst) + " time=" + fmt(secs, 3) + "s");
}

void criterion5(const harness::ExperimentConfig& cfg, const harness::Trained& t, const Eigen::MatrixXd& w,
                double train_secs) {
    Stopwatch sw;
    const auto& layout = t.model.layout();
    Rng rng(mix_seed(cfg.seed, 51));
    const int count = 2000;
    Eigen::MatrixXd first(layout.state_features, count);
    for (int k = 0; k < count; ++k)
        first.col(k) = w.col(rng.uniform_int(0, static_cast<int>(w.cols()) - 1)).head(layout.state_features);
    const Eigen::MatrixXd s = t.model.sample(count, first, nullptr, rng);

    auto mean = [](const Eigen::MatrixXd& m) -> Eigen::VectorXd { return m.rowwise().mean(); };
    auto stdev = [](const Eigen::MatrixXd& m, const Eigen::VectorXd& mu) -> Eigen::VectorXd {
        return (m.colwise() - mu).array().square().rowwise().mean().sqrt().matrix();
    };
    const Eigen::VectorXd dm = mean(w), sm = mean(s);
    const Eigen::VectorXd ds = stdev(w, dm), ss = stdev(s, sm);
    const double mean_gap = (dm - sm).cwiseAbs().maxCoeff();
    const double std_gap = ((ds - ss).cwiseAbs().array() / ds.array()).maxCoeff();

    // forward process at i = N over every training window
    Eigen::MatrixXd noised(w.rows(), w.cols());
    const int n_steps = t.model.schedule().steps();
    for (Eigen::Index k = 0; k < w.cols(); ++k)
        noised.col(k) = diffusion::add_noise(t.model.schedule(), w.col(k), n_steps, rng).tau_i;
    const Eigen::VectorXd nm = mean(noised);
    const Eigen::VectorXd ns = stdev(noised, nm);
    const double terminal_mean = nm.cwiseAbs().maxCoeff();
    const double terminal_std = (ns.array() - 1.0).abs().maxCoeff();

    const double secs = train_secs + sw.seconds();
    report(5, mean_gap <= 0.1 && std_gap <= 0.15 && terminal_mean <= 0.05 && terminal_std <= 0.05 && secs < 900.0,
           "samples=" + std::to_string(count) + " max_mean_gap=" + fmt(mean_gap) + " max_std_rel_gap=" +
               fmt(std_gap) + " terminal_mean=" + fmt(terminal_mean) + " terminal_std_dev=" + fmt(terminal_std) +
               " time=" + fmt(secs, 4) + "s (training " + fmt(train_secs, 4) + "s)");
}

struct RatioStats {
    double violation_rate = 0.0;
    double median_ncost = 0.0;
    double mean_reward = 0.0;
    std::map<std::uint64_t, double> seed_reward;
};

std::map<double, RatioStats> by_ratio(const std::vector<harness::EpisodeRecord>& records) {
    std::map<double, std::vector<const harness::EpisodeRecord*>> groups;
    for (const auto& r : records) groups[r.ratio].push_back(&r);
    std::map<double, RatioStats> out;
    for (const auto& [ratio, recs] : groups) {
        RatioStats s;
        std::vector<double> nc;
        std::map<std::uint64_t, std::pair<double, int>> per_seed;
        for (const auto* r : recs) {
            s.violation_rate += r->violation;
            s.mean_reward += r->reward;
            nc.push_back(r->normalized_cost());
            per_seed[r->seed].first += r->reward;
            per_seed[r->seed].second += 1;
        }
        s.violation_rate /= static_cast<double>(recs.size());
        s.mean_reward /= static_cast<double>(recs.size());
        s.median_ncost = harness::quantile(nc, 0.5);
        for (const auto& [seed, acc] : per_seed) s.seed_reward[seed] = acc.first / acc.second;
        out[ratio] = s;
    }
    return out;
}

// Pooled mean reward may drop at most once between adjacent ratios, and that
// drop must be smaller than the spread of the per-seed means at either ratio.
bool reward_monotone(const std::map<double, RatioStats>& stats, int& inversions) {
    inversions = 0;
    bool ok = true;
    auto spread = [](const RatioStats& s) {
        double lo = INFINITY, hi = -INFINITY;
        for (const auto& [seed, v] : s.seed_reward) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return hi - lo;
    };
    for (auto it = stats.begin(); std::next(it) != stats.end(); ++it) {
        const auto& a = it->second;
        const auto& b = std::next(it)->second;
        if (b.mean_reward >= a.mean_reward) continue;
        ++inversions;
        if (a.mean_reward - b.mean_reward > std::max(spread(a), spread(b))) ok = false;
    }
    return ok && inversions <= 1;
}

harness::SweepResult criterion6(const harness::ExperimentConfig& cfg, const harness::Trained& t) {
    Stopwatch sw;
    const harness::SweepResult res = harness::run_sweep(cfg, t, [&](std::string_view msg) {
        std::cerr << "  [" << fmt(sw.seconds(), 4) << "s] " << msg << std::endl;
    });
    harness::export_sweep(cfg, res);
    const double secs = sw.seconds();

    const auto trebi = by_ratio(res.trebi);
    const auto base = by_ratio(res.unconstrained);
    bool violations_ok = true, median_ok = true, beats_base = true;
    std::ostringstream table;
    for (const auto& [ratio, s] : trebi) {
        const auto& u = base.at(ratio);
        if (ratio >= 0.4 - 1e-12 && s.violation_rate > 0.05) violations_ok = false;
        if (s.median_ncost > 1.0) median_ok = false;
        if (ratio <= 0.8 + 1e-12 && !(s.violation_rate < u.violation_rate)) beats_base = false;
        table << " | r=" << ratio << " viol=" << fmt(s.violation_rate, 3) << " (unc " << fmt(u.violation_rate, 3)
              << ") med_ncost=" << fmt(s.median_ncost, 3) << " reward=" << fmt(s.mean_reward, 5);
    }
    int inversions = 0;
    const bool monotone = reward_monotone(trebi, inversions);
    report(6, violations_ok && median_ok && monotone && beats_base && secs < 1800.0,
           "b_max=" + fmt(res.b_max) + " episodes=" + std::to_string(res.trebi.size()) + table.str() +
               " | reward_inversions=" + std::to_string(inversions) + " time=" + fmt(secs, 4) + "s");
    return res;
}

void criterion7(const harness::ExperimentConfig& cfg) {
    const std::string log = read_file(fs::path(cfg.out) / "steps.jsonl");
    std::istringstream in(log);
    int episodes = 0, skipped = 0;
    double worst = 0.0;
    for (std::string line; std::getline(in, line);) {
        const json j = json::parse(line);
        if (j.at("budget").is_null()) {
            ++skipped;  // unconstrained planner has no budget
            continue;
        }
        const double b = j.at("budget").get<double>();
        const double gamma = j.at("gamma").get<double>();
        double spent = 0.0, disc = 1.0;
        for (const auto& step : j.at("steps")) {
            const double z = step.at("z").get<double>();
            worst = std::max(worst, std::abs(disc * z - (b - spent)));
            spent += disc * step.at("c").get<double>();
            disc *= gamma;
        }
        ++episodes;
    }
    report(7, episodes > 0 && worst <= 1e-9,
           "episodes=" + std::to_string(episodes) + " (skipped " + std::to_string(skipped) +
               " unbudgeted) max|gamma^t z_t - (b - sum gamma^k c_k)|=" + fmt(worst));
}

void criterion8(const fs::path& config, const fs::path& work) {
    Stopwatch sw;
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* name : {"run_a", "run_b"}) {
        harness::ExperimentConfig cfg = harness::load_config(config);
        cfg.out = (work / name).string();
        cfg.artifacts.clear();
        fs::remove_all(cfg.out);
        harness::train(cfg);
        const auto trained = harness::load_trained(cfg, config.string());
        harness::export_sweep(cfg, harness::run_sweep(cfg, trained));
        std::map<std::string, std::string> files;
        for (const char* f : {"summary_trebi.csv", "summary_unconstrained.csv", "episodes.csv"})
            files[f] = read_file(fs::path(cfg.out) / f);
        runs.push_back(std::move(files));
    }
    bool same = true;
    for (const auto& [name, bytes] : runs[0]) same = same && !bytes.empty() && runs[1].at(name) == bytes;
    report(8, same,
           "config=" + config.filename().string() + " csv files compared=" + std::to_string(runs[0].size()) +
               " identical=" + (same ? "yes" : "no") + " time=" + fmt(sw.seconds(), 3) + "s");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string config_path, work_dir = "acceptance", smoke_path;
    bool reuse = false;
    app.add_option("--config", config_path, "experiment config for criteria 4-7")->required();
    app.add_option("--smoke-config", smoke_path, "small config for the determinism check (default: smoke.json next to --config)");
    app.add_option("--work", work_dir, "scratch directory");
    app.add_flag("--reuse", reuse, "keep trained artifacts from a previous run (training time is then not measured)");
    CLI11_PARSE(app, argc, argv);
    if (smoke_path.empty()) smoke_path = (fs::path(config_path).parent_path() / "smoke.json").string();

    try {
        const fs::path work(work_dir);
        if (!reuse) fs::remove_all(work);
        harness::ExperimentConfig cfg = harness::load_config(config_path);
        cfg.out = (work / "sweep").string();
        cfg.artifacts = (work / "artifacts").string();

        const GridInstance grid = grid_instance(cfg);
        criterion1(cfg, grid);
        criterion2(cfg, grid);
        criterion3(cfg);

        Stopwatch train_sw;
        if (!fs::exists(harness::artifact_paths(cfg).guides)) harness::train(cfg, &std::cerr);
        const double train_secs = train_sw.seconds();
        const harness::Trained trained = harness::load_trained(cfg, config_path);
        const cmdp::Dataset data = cmdp::load_dataset(harness::artifact_paths(cfg).dataset);
        const traj::Encoder encoder(trained.env->spec());
        const auto windows =
            traj::make_windows(data, encoder, trained.model.layout().horizon, trained.env->spec().gamma);
        const Eigen::MatrixXd w = diffusion::window_matrix(windows, trained.model.normalizer());

        criterion4(cfg, trained, w);
        criterion5(cfg, trained, w, train_secs);
        criterion6(cfg, trained);
        criterion7(cfg);
        criterion8(smoke_path, work / "determinism");
    } catch (const std::exception& ex) {
        std::cout << "error: " << ex.what() << std::endl;
        return 2;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}

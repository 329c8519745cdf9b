#include "trebi/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "trebi/errors.hpp"

namespace trebi::oracle {

namespace {

int cell_of(const Eigen::VectorXd& v) { return static_cast<int>(std::lround(v[0])); }

double log_sum_exp(const std::vector<double>& x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

std::vector<double> softmax_from_logs(const std::vector<double>& logw, double& log_z) {
    log_z = log_sum_exp(logw);
    std::vector<double> q(logw.size(), 0.0);
    for (std::size_t k = 0; k < logw.size(); ++k)
        q[k] = std::isfinite(logw[k]) ? std::exp(logw[k] - log_z) : 0.0;
    return q;
}

}  // namespace

// ------------------------------------------------------------------ counts

Counts Counts::from_dataset(const cmdp::Dataset& data, const cmdp::CmdpSpec& spec) {
    if (!spec.discrete) throw std::invalid_argument("visit counts need a discrete environment");
    if (data.spec_hash != spec.hash()) throw FormatError("dataset was collected on a different environment");
    Counts c;
    c.num_states = spec.num_states;
    c.num_actions = spec.num_actions;
    const auto s_count = static_cast<std::size_t>(c.num_states);
    const auto a_count = static_cast<std::size_t>(c.num_actions);
    c.start.assign(s_count, 0.0);
    c.n_s.assign(s_count, 0.0);
    c.n_sa.assign(s_count * a_count, 0.0);
    c.n_sas.assign(s_count * a_count * s_count, 0.0);
    for (const auto& ep : data.episodes) {
        if (ep.steps.empty()) continue;
        c.episodes += 1.0;
        c.start[static_cast<std::size_t>(cell_of(ep.steps.front().s))] += 1.0;
        for (const auto& tr : ep.steps) {
            const int s = cell_of(tr.s), a = cell_of(tr.a), s2 = cell_of(tr.s_next);
            c.n_s[static_cast<std::size_t>(s)] += 1.0;
            c.n_sa[static_cast<std::size_t>(s * c.num_actions + a)] += 1.0;
            c.n_sas[static_cast<std::size_t>((s * c.num_actions + a) * c.num_states + s2)] += 1.0;
        }
    }
    if (c.episodes == 0.0) throw std::invalid_argument("dataset has no transitions");
    return c;
}

Counts Counts::scaled(double factor) const {
    if (!(factor > 0.0)) throw std::invalid_argument("count scale must be positive");
    Counts c = *this;
    c.episodes *= factor;
    for (auto* v : {&c.start, &c.n_s, &c.n_sa, &c.n_sas})
        for (double& x : *v) x *= factor;
    return c;
}

double Counts::start_prob(int s) const { return start[static_cast<std::size_t>(s)] / episodes; }

double Counts::behavior(int s, int a) const {
    const double ns = n_s[static_cast<std::size_t>(s)];
    return ns > 0.0 ? sa(s, a) / ns : 0.0;
}

double Counts::dynamics(int s, int a, int s2) const {
    const double n = sa(s, a);
    return n > 0.0 ? sas(s, a, s2) / n : 0.0;
}

// ------------------------------------------------------------------- table

double TrajectoryTable::total_probability() const {
    double s = 0.0;
    for (const auto& p : paths) s += p.prob;
    return s;
}

double TrajectoryTable::max_cost() const {
    double m = 0.0;
    for (const auto& p : paths) m = std::max(m, p.cost);
    return m;
}

std::vector<double> TrajectoryTable::probabilities() const {
    std::vector<double> p;
    p.reserve(paths.size());
    for (const auto& path : paths) p.push_back(path.prob);
    return p;
}

TrajectoryTable enumerate(const cmdp::GridBudget& env, const Counts& counts) {
    const cmdp::CmdpSpec& spec = env.spec();
    if (counts.num_states != spec.num_states || counts.num_actions != spec.num_actions)
        throw ShapeError("counts do not match the environment");
    const int steps = spec.max_len;
    if (std::pow(static_cast<double>(spec.num_actions), steps) > 1e6)
        throw std::invalid_argument("too many action sequences to enumerate");
    TrajectoryTable table;
    table.spec = spec;
    table.steps = steps;
    table.counts = counts;

    Path cur;
    auto dfs = [&](auto&& self, int t, double prob, double reward, double cost, double disc) -> void {
        const int s = cur.states.back();
        if (t == steps) {
            Path p = cur;
            p.prob = prob;
            p.reward = reward;
            p.cost = cost;
            table.paths.push_back(std::move(p));
            return;
        }
        if (counts.n_s[static_cast<std::size_t>(s)] <= 0.0)
            throw InternalError("state " + std::to_string(s) + " is reachable at step " + std::to_string(t) +
                                " under the empirical dynamics but never acted in");
        for (int a = 0; a < spec.num_actions; ++a) {
            const double pa = counts.behavior(s, a);
            if (pa <= 0.0) continue;
            for (int s2 = 0; s2 < spec.num_states; ++s2) {
                const double ps = counts.dynamics(s, a, s2);
                if (ps <= 0.0) continue;
                cur.actions.push_back(a);
                cur.states.push_back(s2);
                self(self, t + 1, prob * pa * ps, reward + disc * env.reward_on_arrival(s2),
                     cost + disc * env.cost_on_arrival(s2), disc * spec.gamma);
                cur.actions.pop_back();
                cur.states.pop_back();
            }
        }
    };
    for (int s0 = 0; s0 < spec.num_states; ++s0) {
        const double p0 = counts.start_prob(s0);
        if (p0 <= 0.0) continue;
        cur.states.assign(1, s0);
        cur.actions.clear();
        dfs(dfs, 0, p0, 0.0, 0.0, 1.0);
    }
    return table;
}

TrajectoryTable enumerate(const cmdp::GridBudget& env, const cmdp::Dataset& data) {
    return enumerate(env, Counts::from_dataset(data, env.spec()));
}

// ----------------------------------------------------------- distributions

double safe_mass(const TrajectoryTable& table, double budget) {
    double m = 0.0;
    for (const auto& p : table.paths)
        if (p.cost <= budget) m += p.prob;
    return m;
}

double unsafe_mass(const TrajectoryTable& table, const std::vector<double>& q, double budget) {
    if (q.size() != table.paths.size()) throw ShapeError("distribution does not match the table");
    double m = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k)
        if (table.paths[k].cost > budget) m += q[k];
    return m;
}

double kl_divergence(const std::vector<double>& q, const std::vector<double>& p) {
    if (q.size() != p.size()) throw ShapeError("distributions differ in size");
    double kl = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (q[k] <= 0.0) continue;
        if (p[k] <= 0.0) return std::numeric_limits<double>::infinity();
        kl += q[k] * (std::log(q[k]) - std::log(p[k]));
    }
    return std::max(kl, 0.0);
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("distributions differ in size");
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
    return 0.5 * s;
}

double expected_reward(const TrajectoryTable& table, const std::vector<double>& q) {
    if (q.size() != table.paths.size()) throw ShapeError("distribution does not match the table");
    double s = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) s += q[k] * table.paths[k].reward;
    return s;
}

OptimalDistribution optimal_q(const TrajectoryTable& table, double budget, double alpha) {
    if (!std::isfinite(alpha)) throw std::invalid_argument("alpha must be finite");
    std::vector<double> logw(table.paths.size(), -std::numeric_limits<double>::infinity());
    bool any = false;
    for (std::size_t k = 0; k < table.paths.size(); ++k) {
        const Path& p = table.paths[k];
        if (p.cost <= budget && p.prob > 0.0) {
            logw[k] = std::log(p.prob) + alpha * p.reward;
            any = true;
        }
    }
    if (!any) throw InfeasibleBudget("no trajectory in the behavior support meets budget " + std::to_string(budget));
    OptimalDistribution out;
    out.q = softmax_from_logs(logw, out.log_z);
    out.alpha = alpha;
    out.budget = budget;
    out.n = std::numeric_limits<double>::infinity();
    out.epsilon = kl_divergence(out.q, table.probabilities());
    return out;
}

OptimalDistribution smoothed_q(const TrajectoryTable& table, double budget, double alpha, double n) {
    if (!(n >= 0.0)) throw std::invalid_argument("penalty weight n must be >= 0");
    std::vector<double> logw(table.paths.size());
    for (std::size_t k = 0; k < table.paths.size(); ++k) {
        const Path& p = table.paths[k];
        const double over = p.cost > budget ? p.cost - budget : 0.0;
        logw[k] = std::log(p.prob) + alpha * (p.reward - n * over);
    }
    OptimalDistribution out;
    out.q = softmax_from_logs(logw, out.log_z);
    out.alpha = alpha;
    out.budget = budget;
    out.n = n;
    out.epsilon = kl_divergence(out.q, table.probabilities());
    return out;
}

bool feasibility(const TrajectoryTable& table, double budget, double eps) {
    if (!(eps >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
    return safe_mass(table, budget) >= std::exp(-eps);
}

std::vector<double> random_feasible_q(const TrajectoryTable& table, double budget, double eps, Rng& rng) {
    const std::vector<double> p = table.probabilities();
    const std::size_t m = p.size();
    const double safe = safe_mass(table, budget);
    if (safe <= 0.0) throw InfeasibleBudget("no safe support");
    if (-std::log(safe) > eps + 1e-12) throw InfeasibleBudget("behavior distribution cannot meet the KL radius");

    std::vector<double> p_safe(m, 0.0);
    for (std::size_t k = 0; k < m; ++k)
        if (table.paths[k].cost <= budget) p_safe[k] = p[k] / safe;

    const int family = rng.uniform_int(0, 2);
    if (family == 0) {
        // tilts of the safe behavior distribution; KL grows with the coefficient
        std::vector<double> logw(m);
        auto tilt = [&](double coef) {
            for (std::size_t k = 0; k < m; ++k)
                logw[k] = p_safe[k] > 0.0 ? std::log(p_safe[k]) + coef * table.paths[k].reward
                                          : -std::numeric_limits<double>::infinity();
            double lz = 0.0;
            return softmax_from_logs(logw, lz);
        };
        double lo = 0.0, hi = 1.0;
        while (kl_divergence(tilt(hi), p) <= eps && hi < 1e6) hi *= 2.0;
        for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            (kl_divergence(tilt(mid), p) <= eps ? lo : hi) = mid;
        }
        return tilt(rng.uniform() * lo);
    }

    // mixture of a base distribution with Dirichlet weights on the safe support
    std::gamma_distribution<double> g(family == 1 ? 1.0 : 0.2, 1.0);
    std::vector<double> r(m, 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < m; ++k)
        if (p_safe[k] > 0.0) total += (r[k] = g(rng.engine()));
    if (total <= 0.0) return p_safe;
    for (double& v : r) v /= total;
    auto mix = [&](double lambda) {
        std::vector<double> q(m);
        for (std::size_t k = 0; k < m; ++k) q[k] = (1.0 - lambda) * p_safe[k] + lambda * r[k];
        return q;
    };
    double lambda_max = 1.0;
    if (kl_divergence(mix(1.0), p) > eps) {
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            (kl_divergence(mix(mid), p) <= eps ? lo : hi) = mid;
        }
        lambda_max = lo;
    }
    return mix(rng.uniform() * lambda_max);
}

// ------------------------------------------------------------------ policy

TimePolicy::TimePolicy(int steps, int num_states, int num_actions)
    : steps_(steps),
      num_states_(num_states),
      num_actions_(num_actions),
      table_(static_cast<std::size_t>(steps) * num_states * num_actions, 0.0) {}

double TimePolicy::prob(int t, int s, int a) const {
    return table_[static_cast<std::size_t>((t * num_states_ + s) * num_actions_ + a)];
}

void TimePolicy::set(int t, int s, int a, double p) {
    table_[static_cast<std::size_t>((t * num_states_ + s) * num_actions_ + a)] = p;
}

TimePolicy TimePolicy::behavior(const Counts& counts, int steps) {
    TimePolicy pi(steps, counts.num_states, counts.num_actions);
    for (int t = 0; t < steps; ++t)
        for (int s = 0; s < counts.num_states; ++s) {
            const bool seen = counts.n_s[static_cast<std::size_t>(s)] > 0.0;
            for (int a = 0; a < counts.num_actions; ++a)
                pi.set(t, s, a, seen ? counts.behavior(s, a) : 1.0 / counts.num_actions);
        }
    return pi;
}

TimePolicy TimePolicy::from_distribution(const TrajectoryTable& table, const std::vector<double>& q) {
    if (q.size() != table.paths.size()) throw ShapeError("distribution does not match the table");
    const int S = table.counts.num_states, A = table.counts.num_actions;
    TimePolicy pi = behavior(table.counts, table.steps);
    std::vector<double> mass(static_cast<std::size_t>(table.steps) * S * A, 0.0);
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (q[k] <= 0.0) continue;
        const Path& p = table.paths[k];
        for (int t = 0; t < table.steps; ++t)
            mass[static_cast<std::size_t>((t * S + p.states[t]) * A + p.actions[t])] += q[k];
    }
    for (int t = 0; t < table.steps; ++t)
        for (int s = 0; s < S; ++s) {
            double tot = 0.0;
            for (int a = 0; a < A; ++a) tot += mass[static_cast<std::size_t>((t * S + s) * A + a)];
            if (tot <= 0.0) continue;
            for (int a = 0; a < A; ++a) pi.set(t, s, a, mass[static_cast<std::size_t>((t * S + s) * A + a)] / tot);
        }
    return pi;
}

namespace {

// Forward pass over state occupancy; `next` supplies (s', prob) for (s, a).
template <typename NextFn, typename StepFn>
void forward(int steps, int S, int A, const TimePolicy& policy, const std::vector<double>& start, NextFn next,
             StepFn on_step) {
    std::vector<double> d = start, nd(static_cast<std::size_t>(S));
    for (int t = 0; t < steps; ++t) {
        std::fill(nd.begin(), nd.end(), 0.0);
        for (int s = 0; s < S; ++s) {
            const double ds = d[static_cast<std::size_t>(s)];
            if (ds <= 0.0) continue;
            for (int a = 0; a < A; ++a) {
                const double w = ds * policy.prob(t, s, a);
                if (w <= 0.0) continue;
                on_step(t, s, a, w);
                for (const auto& [s2, p] : next(t, s, a)) nd[static_cast<std::size_t>(s2)] += w * p;
            }
        }
        std::swap(d, nd);
    }
}

}  // namespace

double exact_return(const cmdp::GridBudget& env, const TimePolicy& policy, const std::vector<double>& start) {
    const auto& spec = env.spec();
    double total = 0.0;
    forward(
        policy.steps(), spec.num_states, spec.num_actions, policy, start,
        [&](int, int s, int a) { return env.next_distribution(s, a); },
        [&](int t, int s, int a, double w) {
            for (const auto& [s2, p] : env.next_distribution(s, a))
                total += std::pow(spec.gamma, t) * w * p * env.reward_on_arrival(s2);
        });
    return total;
}

double exact_return(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                    const std::vector<double>& start) {
    const auto& spec = env.spec();
    auto next = [&](int t, int s, int a) {
        if (counts.sa(s, a) <= 0.0)
            throw UndefinedBound("empirical dynamics undefined at state " + std::to_string(s) + ", action " +
                                 std::to_string(a) + ", step " + std::to_string(t));
        std::vector<std::pair<int, double>> out;
        for (int s2 = 0; s2 < spec.num_states; ++s2)
            if (counts.sas(s, a, s2) > 0.0) out.emplace_back(s2, counts.dynamics(s, a, s2));
        return out;
    };
    double total = 0.0;
    forward(policy.steps(), spec.num_states, spec.num_actions, policy, start, next,
            [&](int t, int s, int a, double w) {
                for (const auto& [s2, p] : next(t, s, a))
                    total += std::pow(spec.gamma, t) * w * p * env.reward_on_arrival(s2);
            });
    return total;
}

// ------------------------------------------------------------------ bounds

void BoundInputs::validate() const {
    if (!(c_dynamics > 0.0) || !(c_cost > 0.0)) throw std::invalid_argument("bound constants must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0,1)");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0,1]");
    if (last_step < 0) throw std::invalid_argument("last step must be >= 0");
}

BoundInputs bound_inputs(const TrajectoryTable& table) {
    BoundInputs in;
    in.gamma = table.spec.gamma;
    in.last_step = table.steps - 1;
    in.reward_max = table.spec.reward_bound;
    in.deterministic = table.spec.deterministic;
    return in;
}

double fitted_dynamics_constant(const cmdp::GridBudget& env, const Counts& counts) {
    const auto& spec = env.spec();
    double best = 0.0;
    for (int s = 0; s < spec.num_states; ++s)
        for (int a = 0; a < spec.num_actions; ++a) {
            const double n = counts.sa(s, a);
            if (n <= 0.0) continue;
            std::vector<double> truth(static_cast<std::size_t>(spec.num_states), 0.0);
            for (const auto& [s2, p] : env.next_distribution(s, a)) truth[static_cast<std::size_t>(s2)] += p;
            double tv = 0.0;
            for (int s2 = 0; s2 < spec.num_states; ++s2)
                tv += std::abs(truth[static_cast<std::size_t>(s2)] - counts.dynamics(s, a, s2));
            best = std::max(best, std::sqrt(n) * 0.5 * tv);
        }
    // an exact empirical model still needs a positive constant
    return std::max(best, std::numeric_limits<double>::min());
}

double uncertainty_term(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                        const BoundInputs& inputs) {
    inputs.validate();
    const auto& spec = env.spec();
    std::vector<double> start(static_cast<std::size_t>(spec.num_states));
    for (int s = 0; s < spec.num_states; ++s) start[static_cast<std::size_t>(s)] = counts.start_prob(s);
    double total = 0.0;
    auto next = [&](int, int s, int a) {
        std::vector<std::pair<int, double>> out;
        for (int s2 = 0; s2 < spec.num_states; ++s2)
            if (counts.sas(s, a, s2) > 0.0) out.emplace_back(s2, counts.dynamics(s, a, s2));
        return out;
    };
    forward(policy.steps(), spec.num_states, spec.num_actions, policy, start, next,
            [&](int t, int s, int a, double w) {
                const double n = counts.sa(s, a);
                if (n <= 0.0)
                    throw UndefinedBound("zero visit count at state " + std::to_string(s) + ", action " +
                                         std::to_string(a) + " on the policy's support");
                total += std::pow(inputs.gamma, t) * w * inputs.c_dynamics / std::sqrt(n);
            });
    return total;
}

double reward_gap_bound(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                        const BoundInputs& inputs, double eps) {
    inputs.validate();
    if (!(eps >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
    const double L = inputs.last_step;
    const double g = inputs.gamma;
    const double w = g < 1.0 ? (1.0 - std::pow(g, L + 1.0)) / (1.0 - g) : L + 1.0;
    const double h = g < 1.0 ? 1.0 / (1.0 - g) : L + 1.0;
    const double kl_term = inputs.deterministic ? 0.0 : w * std::sqrt(L * eps / 2.0);
    return 2.0 * inputs.reward_max * (kl_term + h * uncertainty_term(env, counts, policy, inputs));
}

double cost_gap_bound(const Path& path, const Counts& counts, const BoundInputs& inputs) {
    inputs.validate();
    double total = 0.0, disc = 1.0;
    for (std::size_t t = 0; t < path.actions.size(); ++t) {
        const double n = counts.sa(path.states[t], path.actions[t]);
        if (n <= 0.0)
            throw UndefinedBound("zero visit count at step " + std::to_string(t) + " of the trajectory");
        total += disc * inputs.c_cost / std::sqrt(n);
        disc *= inputs.gamma;
    }
    return total;
}

CostGapTrials cost_gap_trials(const cmdp::GridBudget& env, const TrajectoryTable& table, double sigma, double delta,
                              int trials, Rng& rng) {
    if (!table.spec.deterministic) throw std::invalid_argument("cost gap trials need deterministic dynamics");
    if (!(sigma > 0.0)) throw std::invalid_argument("noise scale must be positive");
    if (table.paths.empty()) throw std::invalid_argument("empty trajectory table");
    BoundInputs in = bound_inputs(table);
    in.delta = delta;
    const boost::math::normal_distribution<double> unit;
    in.c_cost = sigma * boost::math::quantile(unit, 1.0 - delta / (2.0 * (in.last_step + 1)));
    in.validate();

    CostGapTrials out;
    out.trials = trials;
    out.noise_std = sigma;
    out.c_cost = in.c_cost;
    const Counts& counts = table.counts;
    std::vector<double> cdf(table.paths.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < cdf.size(); ++k) cdf[k] = (acc += table.paths[k].prob);
    std::vector<double> err(counts.n_sa.size());
    for (int trial = 0; trial < trials; ++trial) {
        // estimate error of each (s,a) cost mean for this synthetic dataset
        for (std::size_t k = 0; k < err.size(); ++k)
            err[k] = counts.n_sa[k] > 0.0 ? sigma / std::sqrt(counts.n_sa[k]) * rng.normal() : 0.0;
        const double u = rng.uniform() * acc;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const Path& p = table.paths[static_cast<std::size_t>(std::min<std::ptrdiff_t>(
            it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1))];
        double c_true = 0.0, c_hat = 0.0, disc = 1.0;
        for (std::size_t t = 0; t < p.actions.size(); ++t) {
            const double c = env.cost_on_arrival(p.states[t + 1]);
            c_true += disc * c;
            c_hat += disc * (c + err[static_cast<std::size_t>(p.states[t] * counts.num_actions + p.actions[t])]);
            disc *= in.gamma;
        }
        if (std::abs(c_true - c_hat) <= cost_gap_bound(p, counts, in)) ++out.within;
    }
    return out;
}

}  // namespace trebi::oracle

#pragma once

#include <vector>

#include "trebi/cmdp.hpp"
#include "trebi/rng.hpp"

namespace trebi::oracle {

// Visit counts of a discrete dataset.
struct Counts {
    int num_states = 0;
    int num_actions = 0;
    double episodes = 0.0;
    std::vector<double> start;  // initial-state counts
    std::vector<double> n_s;    // N(s): times s was acted in
    std::vector<double> n_sa;   // N(s,a), index s * A + a
    std::vector<double> n_sas;  // N(s,a,s'), index (s * A + a) * S + s'

    static Counts from_dataset(const cmdp::Dataset& data, const cmdp::CmdpSpec& spec);
    Counts scaled(double factor) const;

    double sa(int s, int a) const { return n_sa[static_cast<std::size_t>(s * num_actions + a)]; }
    double sas(int s, int a, int s2) const {
        return n_sas[static_cast<std::size_t>((s * num_actions + a) * num_states + s2)];
    }
    double start_prob(int s) const;
    // pi_beta(a|s) = N(s,a) / N(s); 0 for unvisited s.
    double behavior(int s, int a) const;
    // T^(s'|s,a) = N(s,a,s') / N(s,a); 0 for unvisited (s,a).
    double dynamics(int s, int a, int s2) const;
};

struct Path {
    std::vector<int> states;   // steps + 1 entries
    std::vector<int> actions;  // steps entries
    double prob = 0.0;         // p(tau) under pi_beta and T^
    double reward = 0.0;       // discounted, true reward
    double cost = 0.0;         // discounted, true cost
};

struct TrajectoryTable {
    cmdp::CmdpSpec spec;
    int steps = 0;
    Counts counts;
    std::vector<Path> paths;  // only paths with positive probability

    double total_probability() const;
    double max_cost() const;
    std::vector<double> probabilities() const;
};

// Enumerates every length-`max_len` trajectory with positive probability under
// the empirical behavior policy and dynamics. Throws InternalError if a state
// without data is reachable before the last step.
TrajectoryTable enumerate(const cmdp::GridBudget& env, const Counts& counts);
TrajectoryTable enumerate(const cmdp::GridBudget& env, const cmdp::Dataset& data);

struct OptimalDistribution {
    std::vector<double> q;
    double alpha = 0.0;
    double log_z = 0.0;
    double budget = 0.0;
    double epsilon = 0.0;  // achieved KL(q || p)
    double n = 0.0;        // overshoot weight; +inf for the hard-constrained form
};

double safe_mass(const TrajectoryTable& table, double budget);
double unsafe_mass(const TrajectoryTable& table, const std::vector<double>& q, double budget);

// q*_b(tau) = p(tau) exp(alpha R(tau)) / Z on C(tau) <= b, 0 elsewhere.
// Throws InfeasibleBudget when no trajectory with positive probability is safe.
OptimalDistribution optimal_q(const TrajectoryTable& table, double budget, double alpha);
// q*_{b,n}(tau) proportional to p(tau) exp(alpha (R - n [C > b] (C - b))) over all tau.
OptimalDistribution smoothed_q(const TrajectoryTable& table, double budget, double alpha, double n);
// Safe behavior mass >= exp(-eps).
bool feasibility(const TrajectoryTable& table, double budget, double eps);

double kl_divergence(const std::vector<double>& q, const std::vector<double>& p);
double total_variation(const std::vector<double>& a, const std::vector<double>& b);
double expected_reward(const TrajectoryTable& table, const std::vector<double>& q);

// Random distributions on the safe support with KL(q || p) <= eps: either an
// exponential tilt of the safe behavior distribution or a Dirichlet-weighted
// mixture with it.
std::vector<double> random_feasible_q(const TrajectoryTable& table, double budget, double eps, Rng& rng);

// Time-indexed Markov policy pi_t(a|s).
class TimePolicy {
public:
    TimePolicy(int steps, int num_states, int num_actions);

    // Conditional action marginals of q; states that q never visits at time t
    // fall back to pi_beta, then to uniform.
    static TimePolicy from_distribution(const TrajectoryTable& table, const std::vector<double>& q);
    static TimePolicy behavior(const Counts& counts, int steps);

    double prob(int t, int s, int a) const;
    void set(int t, int s, int a, double p);
    int steps() const { return steps_; }

private:
    int steps_, num_states_, num_actions_;
    std::vector<double> table_;
};

// Exact discounted return of a policy from `start` under the true dynamics, or
// under the empirical dynamics of `counts`.
double exact_return(const cmdp::GridBudget& env, const TimePolicy& policy, const std::vector<double>& start);
double exact_return(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                    const std::vector<double>& start);

struct BoundInputs {
    double c_dynamics = 1.0;  // C_T: (1/2)||T - T^||_1 <= C_T / sqrt(N)
    double c_cost = 1.0;      // C_c: |c - c^| <= C_c / sqrt(N)
    double delta = 0.05;
    double gamma = 1.0;
    int last_step = 0;        // L: trajectories cover steps 0..L
    double reward_max = 1.0;  // per-step reward bound
    bool deterministic = false;

    void validate() const;
};

BoundInputs bound_inputs(const TrajectoryTable& table);

// max over visited (s,a) of sqrt(N(s,a)) * TV(T(.|s,a), T^(.|s,a)).
double fitted_dynamics_constant(const cmdp::GridBudget& env, const Counts& counts);

// E_{pi, T^}[ sum_t gamma^t C_T / sqrt(N(s_t, a_t)) ] from the empirical start distribution.
// Throws UndefinedBound if the policy acts where N(s,a) = 0.
double uncertainty_term(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                        const BoundInputs& inputs);

// (2 R_m) [ w sqrt(L eps / 2) + h * uncertainty ] with w = (1 - gamma^{L+1}) / (1 - gamma)
// and h = 1 / (1 - gamma); both become L + 1 at gamma = 1. The square-root
// term is dropped for deterministic environments.
double reward_gap_bound(const cmdp::GridBudget& env, const Counts& counts, const TimePolicy& policy,
                        const BoundInputs& inputs, double eps);

// sum_t gamma^t C_c / sqrt(N(s_t, a_t)) along one trajectory.
double cost_gap_bound(const Path& path, const Counts& counts, const BoundInputs& inputs);

struct CostGapTrials {
    int trials = 0;
    int within = 0;
    double noise_std = 0.0;
    double c_cost = 0.0;

    double fraction() const { return trials > 0 ? static_cast<double>(within) / trials : 0.0; }
};

// Per-(s,a) cost estimates are the mean of N(s,a) observations with Gaussian
// noise of std sigma. C_c is set to sigma * z_{1 - delta / (2 (L+1))} so that
// all steps of a trajectory hold jointly with probability >= 1 - delta.
// Each trial draws fresh estimates and a trajectory from the behavior table.
CostGapTrials cost_gap_trials(const cmdp::GridBudget& env, const TrajectoryTable& table, double sigma, double delta,
                              int trials, Rng& rng);

}  // namespace trebi::oracle

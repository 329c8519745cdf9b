#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "doctest.h"

#include "trebi/cmdp.hpp"
#include "trebi/errors.hpp"
#include "trebi/oracle.hpp"

using namespace trebi;
using namespace trebi::oracle;

namespace {

TrajectoryTable manual_table(const std::vector<double>& p, const std::vector<double>& r,
                             const std::vector<double>& c) {
    TrajectoryTable t;
    for (std::size_t k = 0; k < p.size(); ++k) {
        Path path;
        path.prob = p[k];
        path.reward = r[k];
        path.cost = c[k];
        t.paths.push_back(path);
    }
    return t;
}

cmdp::Dataset grid_data(const cmdp::GridBudget& env, int episodes, std::uint64_t seed) {
    auto behavior = cmdp::make_behavior("grid_budget", env);
    Rng rng(seed);
    return cmdp::collect_dataset(env, *behavior, episodes, rng);
}

double max_cost(const TrajectoryTable& t) {
    double m = 0.0;
    for (const auto& p : t.paths) m = std::max(m, p.cost);
    return m;
}

std::vector<double> start_vector(const Counts& c) {
    std::vector<double> s(static_cast<std::size_t>(c.num_states));
    for (int k = 0; k < c.num_states; ++k) s[static_cast<std::size_t>(k)] = c.start_prob(k);
    return s;
}

// 1x3 corridor: only left/right are ever taken, uniformly, from the middle cell.
struct Corridor {
    cmdp::GridBudget env;
    Counts counts;

    Corridor() : env(cmdp::GridBudgetConfig{1, 3, {1}, 2, {0}, 0.0, 2, 1.0}) {
        const int S = 3, A = 4;
        counts.num_states = S;
        counts.num_actions = A;
        counts.episodes = 1;
        counts.start.assign(S, 0.0);
        counts.start[1] = 1;
        counts.n_s.assign(S, 2.0);
        counts.n_sa.assign(S * A, 0.0);
        counts.n_sas.assign(S * A * S, 0.0);
        for (int s = 0; s < S; ++s)
            for (int a : {int(cmdp::GridBudget::kLeft), int(cmdp::GridBudget::kRight)}) {
                counts.n_sa[static_cast<std::size_t>(s * A + a)] = 1;
                counts.n_sas[static_cast<std::size_t>((s * A + a) * S + env.neighbor(s, a))] = 1;
            }
    }
};

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("deterministic behavior on a deterministic grid gives one trajectory") {
    cmdp::GridBudget env(cmdp::GridBudgetConfig{3, 3, {0}, 2, {1, 4}, 0.0, 4, 1.0});
    cmdp::GridGreedyPolicy policy(env, 0.0);
    Rng rng(1);
    const auto data = cmdp::collect_dataset(env, policy, 20, rng);
    const auto table = enumerate(env, data);
    REQUIRE(table.paths.size() == 1);
    CHECK(table.paths[0].prob == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("uniform two-action behavior over two steps gives four equal trajectories") {
    Corridor c;
    const auto table = enumerate(c.env, c.counts);
    REQUIRE(table.paths.size() == 4);
    for (const auto& p : table.paths) CHECK(p.prob == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("table sums to one and probabilities are non-negative") {
    for (const char* id : {"grid_budget", "grid_budget_slip"}) {
        auto env_ptr = cmdp::make_env(id);
        const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
        auto behavior = cmdp::make_behavior(id, env);
        Rng rng(3);
        const auto data = cmdp::collect_dataset(env, *behavior, 300, rng);
        const auto table = enumerate(env, data);
        CHECK(std::abs(table.total_probability() - 1.0) < 1e-12);
        for (const auto& p : table.paths) CHECK(p.prob > 0.0);
    }
}

TEST_CASE("table probabilities match Monte-Carlo rollouts of the empirical model") {
    auto env_ptr = cmdp::make_env("grid_budget_slip");
    const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
    auto behavior = cmdp::make_behavior("grid_budget_slip", env);
    Rng rng(4);
    const auto data = cmdp::collect_dataset(env, *behavior, 200, rng);
    const auto table = enumerate(env, data);
    const Counts& n = table.counts;

    auto draw = [&](auto&& weight, int size) {
        double u = rng.uniform(), acc = 0.0;
        for (int k = 0; k < size; ++k) {
            acc += weight(k);
            if (u < acc) return k;
        }
        return size - 1;
    };
    std::map<std::vector<int>, double> freq;
    const int rollouts = 100000;
    for (int r = 0; r < rollouts; ++r) {
        std::vector<int> key;
        int s = draw([&](int k) { return n.start_prob(k); }, n.num_states);
        key.push_back(s);
        for (int t = 0; t < table.steps; ++t) {
            const int a = draw([&](int k) { return n.behavior(s, k); }, n.num_actions);
            const int s2 = draw([&](int k) { return n.dynamics(s, a, k); }, n.num_states);
            key.push_back(a);
            key.push_back(s2);
            s = s2;
        }
        freq[key] += 1.0 / rollouts;
    }
    double worst = 0.0;
    for (const auto& p : table.paths) {
        std::vector<int> key{p.states[0]};
        for (std::size_t t = 0; t < p.actions.size(); ++t) {
            key.push_back(p.actions[t]);
            key.push_back(p.states[t + 1]);
        }
        const auto it = freq.find(key);
        worst = std::max(worst, std::abs(p.prob - (it == freq.end() ? 0.0 : it->second)));
        if (it != freq.end()) freq.erase(it);
    }
    // anything left over was sampled but is missing from the table
    CHECK(freq.empty());
    CHECK(worst < 0.01);
}

TEST_CASE("trajectory costs on the grid match the arrival sums") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 200, 5));
    for (const auto& p : table.paths) {
        double c = 0.0, r = 0.0;
        for (std::size_t t = 1; t < p.states.size(); ++t) {
            c += env.cost_on_arrival(p.states[t]);
            r += env.reward_on_arrival(p.states[t]);
        }
        CHECK(p.cost == doctest::Approx(c));
        CHECK(p.reward == doctest::Approx(r));
    }
}

TEST_CASE("optimal_q with a single safe trajectory puts all mass on it") {
    const auto t = manual_table({0.5, 0.5}, {1, 0}, {0, 2});
    const auto q = optimal_q(t, 1.0, 1.0);
    CHECK(q.q[0] == doctest::Approx(1.0));
    CHECK(q.q[1] == 0.0);
}

TEST_CASE("optimal_q at alpha = ln 2 gives 2/3, 1/3") {
    const auto t = manual_table({0.5, 0.5}, {1, 0}, {0, 0});
    const auto q = optimal_q(t, 1.0, std::log(2.0));
    CHECK(q.q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(q.q[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    // achieved KL reported
    const double kl = 2.0 / 3.0 * std::log(4.0 / 3.0) + 1.0 / 3.0 * std::log(2.0 / 3.0);
    CHECK(q.epsilon == doctest::Approx(kl).epsilon(1e-12));
}

TEST_CASE("optimal_q at alpha = 0 is the renormalized safe behavior distribution") {
    const auto t = manual_table({0.2, 0.3, 0.5}, {3, 1, 7}, {0, 1, 5});
    const auto q = optimal_q(t, 1.0, 0.0);
    CHECK(q.q[0] == doctest::Approx(0.4));
    CHECK(q.q[1] == doctest::Approx(0.6));
    CHECK(q.q[2] == 0.0);
}

TEST_CASE("optimal_q with no safe support throws") {
    const auto t = manual_table({0.5, 0.5}, {1, 0}, {3, 2});
    CHECK_THROWS_AS(optimal_q(t, 1.0, 1.0), InfeasibleBudget);
}

TEST_CASE("feasibility examples") {
    const auto all_safe = manual_table({0.5, 0.5}, {0, 0}, {0, 0});
    for (double eps : {0.0, 0.1, 10.0}) CHECK(feasibility(all_safe, 1.0, eps));
    const auto half = manual_table({0.5, 0.5}, {0, 0}, {0, 2});
    CHECK(feasibility(half, 1.0, std::log(2.0)));
    CHECK_FALSE(feasibility(half, 1.0, std::log(2.0) - 1e-9));
    const auto thirty = manual_table({0.3, 0.7}, {0, 0}, {0, 2});
    CHECK_FALSE(feasibility(thirty, 1.0, 1.0));
    CHECK_THROWS_AS(feasibility(half, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("q*_b satisfies KKT and beats random feasible distributions") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 500, 6));
    const double b = 0.5 * max_cost(table);
    const double alpha = 1.0;
    const auto q = optimal_q(table, b, alpha);
    CHECK(std::accumulate(q.q.begin(), q.q.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));

    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t k = 0; k < q.q.size(); ++k) {
        const auto& p = table.paths[k];
        if (p.cost > b) {
            CHECK(q.q[k] == 0.0);
            continue;
        }
        const double v = std::log(q.q[k]) - std::log(p.prob) - alpha * p.reward;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(hi - lo < 1e-9);

    const double best = expected_reward(table, q.q);
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto r = random_feasible_q(table, b, q.epsilon, rng);
        REQUIRE(kl_divergence(r, table.probabilities()) <= q.epsilon + 1e-12);
        REQUIRE(unsafe_mass(table, r, b) == 0.0);
        CHECK(best >= expected_reward(table, r) - 1e-9);
    }
}

TEST_CASE("smoothed_q at n = 0 is the untruncated tilt") {
    const auto t = manual_table({0.5, 0.5}, {1, 0}, {3, 0});
    const auto q = smoothed_q(t, 1.0, std::log(2.0), 0.0);
    CHECK(q.q[0] == doctest::Approx(2.0 / 3.0));
    CHECK(q.q[1] == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(smoothed_q(t, 1.0, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("unsafe mass decreases in n and reaches the hard constraint") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 500, 8));
    const double b = 0.5 * max_cost(table);
    const auto hard = optimal_q(table, b, 1.0);
    double prev = 2.0;
    for (double n : {0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0}) {
        const auto q = smoothed_q(table, b, 1.0, n);
        const double u = unsafe_mass(table, q.q, b);
        // strictly smaller until the unsafe mass underflows to zero
        CHECK((u < prev || u == 0.0));
        prev = u;
        if (n == 10000.0) {
            CHECK(u < 1e-3);
            CHECK(total_variation(q.q, hard.q) < 1e-3);
        }
    }
}

TEST_CASE("reward-gap bound vanishes with unlimited deterministic data") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 500, 9));
    const Counts big = table.counts.scaled(1e6);
    BoundInputs in = bound_inputs(table);
    REQUIRE(in.deterministic);
    const auto policy = TimePolicy::behavior(big, table.steps);
    CHECK(reward_gap_bound(env, big, policy, in, 0.3) < 1e-2 * in.reward_max);
}

TEST_CASE("doubling every count divides the uncertainty term by sqrt 2") {
    auto env_ptr = cmdp::make_env("grid_budget_slip");
    const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
    auto behavior = cmdp::make_behavior("grid_budget_slip", env);
    Rng rng(10);
    const auto table = enumerate(env, cmdp::collect_dataset(env, *behavior, 300, rng));
    const BoundInputs in = bound_inputs(table);
    const auto policy = TimePolicy::behavior(table.counts, table.steps);
    const double u1 = uncertainty_term(env, table.counts, policy, in);
    const double u2 = uncertainty_term(env, table.counts.scaled(2.0), policy, in);
    CHECK(std::abs(u1 / u2 - std::sqrt(2.0)) < 1e-9);
}

TEST_CASE("uncertainty term on an unvisited pair is undefined") {
    Corridor c;
    const auto table = enumerate(c.env, c.counts);
    TimePolicy up(table.steps, 3, 4);
    for (int t = 0; t < table.steps; ++t)
        for (int s = 0; s < 3; ++s) up.set(t, s, cmdp::GridBudget::kUp, 1.0);
    CHECK_THROWS_AS(uncertainty_term(c.env, c.counts, up, bound_inputs(table)), UndefinedBound);
}

TEST_CASE("bound inputs are validated") {
    BoundInputs in;
    in.c_dynamics = 0.0;
    CHECK_THROWS_AS(in.validate(), std::invalid_argument);
    in = BoundInputs{};
    in.delta = 1.0;
    CHECK_THROWS_AS(in.validate(), std::invalid_argument);
}

TEST_CASE("cost-gap bound with uniform counts at gamma = 1 is (L+1) C / sqrt(N)") {
    Corridor c;
    Counts n = c.counts.scaled(9.0);  // every visited pair has N = 9
    const auto table = enumerate(c.env, n);
    BoundInputs in = bound_inputs(table);
    in.c_cost = 0.6;
    for (const auto& p : table.paths)
        CHECK(cost_gap_bound(p, n, in) == doctest::Approx((in.last_step + 1) * 0.6 / 3.0).epsilon(1e-14));
}

TEST_CASE("exact cost model has zero cost gap, within any bound") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 300, 11));
    BoundInputs in = bound_inputs(table);
    for (const auto& p : table.paths) {
        double c = 0.0;
        for (std::size_t t = 1; t < p.states.size(); ++t) c += env.cost_on_arrival(p.states[t]);
        CHECK(std::abs(p.cost - c) == 0.0);
        CHECK(std::abs(p.cost - c) <= cost_gap_bound(p, table.counts, in));
    }
}

TEST_CASE("noisy cost estimates stay within the bound at rate 1 - delta") {
    cmdp::GridBudget env;
    const auto table = enumerate(env, grid_data(env, 300, 12));
    Rng rng(13);
    const auto trials = cost_gap_trials(env, table, 0.5, 0.05, 4000, rng);
    CHECK(trials.fraction() >= 0.95);
}

TEST_CASE("reward gap on the slip grid is within the fitted bound") {
    auto env_ptr = cmdp::make_env("grid_budget_slip");
    const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
    auto behavior = cmdp::make_behavior("grid_budget_slip", env);
    for (std::uint64_t seed : {14u, 15u, 16u}) {
        Rng rng(seed);
        const auto table = enumerate(env, cmdp::collect_dataset(env, *behavior, 300, rng));
        BoundInputs in = bound_inputs(table);
        in.c_dynamics = fitted_dynamics_constant(env, table.counts);
        const auto q = optimal_q(table, 0.5 * max_cost(table), 1.0);
        const auto policy = TimePolicy::from_distribution(table, q.q);
        const auto start = start_vector(table.counts);
        const double gap = std::abs(expected_reward(table, q.q) - exact_return(env, policy, start));
        CHECK(gap <= reward_gap_bound(env, table.counts, policy, in, q.epsilon));
    }
}

TEST_CASE("q*_b policy return beats feasible policies up to twice the bound") {
    auto env_ptr = cmdp::make_env("grid_budget_slip");
    const auto& env = dynamic_cast<const cmdp::GridBudget&>(*env_ptr);
    auto behavior = cmdp::make_behavior("grid_budget_slip", env);
    Rng rng(17);
    const auto table = enumerate(env, cmdp::collect_dataset(env, *behavior, 300, rng));
    BoundInputs in = bound_inputs(table);
    in.c_dynamics = fitted_dynamics_constant(env, table.counts);
    const double b = 0.5 * max_cost(table);
    const auto q = optimal_q(table, b, 1.0);
    const auto star = TimePolicy::from_distribution(table, q.q);
    const auto start = start_vector(table.counts);
    const double j_star = exact_return(env, star, start);
    const double bound_star = reward_gap_bound(env, table.counts, star, in, q.epsilon);
    for (int trial = 0; trial < 200; ++trial) {
        const auto r = random_feasible_q(table, b, q.epsilon, rng);
        const auto pol = TimePolicy::from_distribution(table, r);
        const double bound = std::max(bound_star, reward_gap_bound(env, table.counts, pol, in, q.epsilon));
        CHECK(j_star >= exact_return(env, pol, start) - 2.0 * bound);
    }
}

TEST_CASE("enumerate rejects mismatched counts") {
    cmdp::GridBudget env;
    Corridor c;
    CHECK_THROWS_AS(enumerate(env, c.counts), ShapeError);
}

}  // TEST_SUITE

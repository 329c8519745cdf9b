#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "trebi/rng.hpp"

namespace trebi::cmdp {

// Static description of a constrained MDP. Discrete environments carry their
// state/action index in a one-entry vector; continuous ones use raw coordinates.
struct CmdpSpec {
    std::string name;
    bool discrete = false;
    bool deterministic = true;
    int state_dim = 0;
    int action_dim = 0;
    int num_states = 0;   // discrete only
    int num_actions = 0;  // discrete only
    double gamma = 1.0;
    int max_len = 1;
    double reward_bound = 1.0;
    double cost_bound = 1.0;
    double budget_max = 1.0;
    // Continuous action box (identical bound on every coordinate).
    double action_limit = 1.0;

    void validate() const;
    std::string canonical() const;
    std::uint64_t hash() const;
};

// One-line text form used inside checkpoints.
void save_spec(std::ostream& out, const CmdpSpec& spec);
CmdpSpec load_spec(std::istream& in);

struct EnvState {
    Eigen::VectorXd s;
    int t = 0;
    bool done = false;
};

struct Transition {
    Eigen::VectorXd s;
    Eigen::VectorXd a;
    Eigen::VectorXd s_next;
    double r = 0.0;
    double c = 0.0;
    bool done = false;
};

class Env {
public:
    virtual ~Env() = default;

    const CmdpSpec& spec() const { return spec_; }
    virtual EnvState reset(Rng& rng) const = 0;
    // Advances state in place. Throws UsageError once the episode is done.
    Transition step(EnvState& state, const Eigen::VectorXd& action, Rng& rng) const;

protected:
    explicit Env(CmdpSpec spec) : spec_(std::move(spec)) {}

    struct Outcome {
        Eigen::VectorXd s_next;
        double r;
        double c;
        bool terminal;
    };
    virtual Outcome transition(const Eigen::VectorXd& s, const Eigen::VectorXd& a, Rng& rng) const = 0;
    virtual void check_action(const Eigen::VectorXd& a) const = 0;

    CmdpSpec spec_;
};

// 3x3 grid with four moves. Reward 1 when the move lands on the goal, cost 1
// when it lands on a hazard. Off-grid moves leave the agent in place. With
// slip > 0 the move is replaced by one of the two perpendicular moves.
struct GridBudgetConfig {
    int rows = 3;
    int cols = 3;
    std::vector<int> start_cells{0, 6};
    int goal = 2;
    std::vector<int> hazards{1, 4};
    double slip = 0.0;
    int max_len = 4;
    double gamma = 1.0;
};

class GridBudget final : public Env {
public:
    enum Move : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };

    explicit GridBudget(GridBudgetConfig config = {});

    EnvState reset(Rng& rng) const override;

    const GridBudgetConfig& config() const { return config_; }
    int neighbor(int cell, int move) const;
    // True next-state distribution T(.|s,a) as (cell, probability) pairs.
    std::vector<std::pair<int, double>> next_distribution(int cell, int move) const;
    double reward_on_arrival(int cell) const { return cell == config_.goal ? 1.0 : 0.0; }
    double cost_on_arrival(int cell) const;
    bool is_hazard(int cell) const;
    // Initial-state distribution over cells.
    std::vector<double> start_distribution() const;

protected:
    Outcome transition(const Eigen::VectorXd& s, const Eigen::VectorXd& a, Rng& rng) const override;
    void check_action(const Eigen::VectorXd& a) const override;

private:
    GridBudgetConfig config_;
};

// 2-D point mass in [-1,1]^2 moving by a bounded velocity step. Reward is the
// negative distance to the goal after the move; cost is a smooth bump inside a
// circular hazard, penalty * (1 - (d/r)^2)^2 for d < r.
struct ReachAvoidConfig {
    Eigen::Vector2d start{-0.7, 0.0};
    double start_jitter = 0.0;  // half-width of a uniform box around start
    Eigen::Vector2d goal{0.7, 0.0};
    Eigen::Vector2d hazard_center{0.0, 0.0};
    double hazard_radius = 0.35;
    double hazard_penalty = 1.0;
    double step_size = 0.1;
    int max_len = 32;
    double gamma = 0.99;
};

class ReachAvoid final : public Env {
public:
    explicit ReachAvoid(ReachAvoidConfig config = {});

    EnvState reset(Rng& rng) const override;

    const ReachAvoidConfig& config() const { return config_; }
    double hazard_cost(const Eigen::Vector2d& p) const;
    double reward_at(const Eigen::Vector2d& p) const;

protected:
    Outcome transition(const Eigen::VectorXd& s, const Eigen::VectorXd& a, Rng& rng) const override;
    void check_action(const Eigen::VectorXd& a) const override;

private:
    ReachAvoidConfig config_;
};

class BehaviorPolicy {
public:
    virtual ~BehaviorPolicy() = default;
    virtual std::string tag() const = 0;
    virtual void begin_episode(Rng& /*rng*/) {}
    virtual Eigen::VectorXd act(const EnvState& state, Rng& rng) = 0;
};

// Shortest-route controller toward the goal (ignores hazards) with epsilon-uniform exploration.
class GridGreedyPolicy final : public BehaviorPolicy {
public:
    GridGreedyPolicy(const GridBudget& env, double epsilon) : env_(env), epsilon_(epsilon) {}
    std::string tag() const override;
    Eigen::VectorXd act(const EnvState& state, Rng& rng) override;
    int greedy_move(int cell) const;

private:
    const GridBudget& env_;
    double epsilon_;
};

// Heads for a per-episode waypoint on the hazard's vertical line, then for the
// goal, at a capped speed with Gaussian action noise. Waypoint offsets are drawn
// uniformly from [-spread, spread], so episodic costs range from hazard-centred
// to hazard-free.
class WaypointPolicy final : public BehaviorPolicy {
public:
    WaypointPolicy(const ReachAvoid& env, double speed = 0.7, double noise_std = 0.25, double spread = 0.6)
        : env_(env), speed_(speed), noise_std_(noise_std), spread_(spread) {}
    std::string tag() const override;
    void begin_episode(Rng& rng) override;
    Eigen::VectorXd act(const EnvState& state, Rng& rng) override;
    void set_waypoint_offset(double offset) { offset_ = offset; }

private:
    const ReachAvoid& env_;
    double speed_;
    double noise_std_;
    double spread_;
    double offset_ = 0.0;
    bool passed_waypoint_ = false;
};

struct Episode {
    std::vector<Transition> steps;
};

struct Dataset {
    static constexpr int kSchemaVersion = 1;

    std::string env_name;
    std::uint64_t spec_hash = 0;
    std::string behavior;
    int state_dim = 0;
    int action_dim = 0;
    std::vector<Episode> episodes;

    std::size_t transitions() const;
};

Dataset collect_dataset(const Env& env, BehaviorPolicy& policy, int episodes, Rng& rng);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Registry of built-in environments: "grid_budget", "grid_budget_slip", "reach_avoid".
std::unique_ptr<Env> make_env(std::string_view id);
// Shipped behavior policy for a registry environment; env must outlive the policy.
std::unique_ptr<BehaviorPolicy> make_behavior(std::string_view id, const Env& env);

// Discounted episodic sums of a rollout.
double episode_return(const Episode& ep, double gamma);
double episode_cost(const Episode& ep, double gamma);

}  // namespace trebi::cmdp

#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "trebi/cmdp.hpp"
#include "trebi/diffusion.hpp"
#include "trebi/guide.hpp"
#include "trebi/rng.hpp"
#include "trebi/trajectory.hpp"

namespace trebi::planner {

inline constexpr double kUnconstrained = std::numeric_limits<double>::infinity();

// Remaining budget rescaled to the current step: z_0 = b, z_{t+1} = (z_t - c_t) / gamma.
// z is allowed to go negative once the budget is exhausted.
class BudgetTracker {
public:
    BudgetTracker(double budget, double gamma);

    double z() const { return z_; }
    int t() const { return t_; }
    double budget() const { return budget_; }
    double gamma() const { return gamma_; }
    void update(double cost);

private:
    double budget_;
    double gamma_;
    double z_;
    int t_ = 0;
};

enum class PlannerKind : std::uint8_t {
    kTrebi,           // budget-aware guidance and safe-best selection
    kUnconstrained,   // reward-only guidance, max predicted reward
    kBehaviorSample,  // unguided samples, uniformly random candidate
};

std::string_view to_string(PlannerKind kind);
PlannerKind planner_kind_from_string(std::string_view name);

struct PlannerConfig {
    int candidates = 16;
    int replan_interval = 1;
    int horizon = 0;  // 0 means the model's horizon; otherwise must match it
    guide::GuideConfig guide;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PlanResult {
    traj::Trajectory plan;         // denormalized features of the chosen candidate
    Eigen::MatrixXd candidates;    // normalized, one per column
    Eigen::RowVectorXd reward_hat;  // guide estimates on the clean candidates
    Eigen::RowVectorXd cost_hat;
    int chosen = 0;
    bool fallback = false;  // no candidate predicted within budget
    int resamples = 0;
    // unsafe_by_step[i] = candidates on the penalized branch at reverse step i (index 0 unused).
    std::vector<int> unsafe_by_step;
};

// Samples K candidates from the guided reverse chain conditioned on `state`
// and picks the highest predicted reward among those with predicted cost <= z.
// With no such candidate, the lowest predicted cost is returned.
PlanResult plan(const diffusion::DiffusionModel& model, const guide::GuidePair& guides, const Eigen::VectorXd& state,
                double z, const PlannerConfig& config, Rng& rng, PlannerKind kind = PlannerKind::kTrebi);

// Raw env action of step k of a plan.
Eigen::VectorXd plan_action(const diffusion::DiffusionModel& model, const traj::Trajectory& plan, int k);

struct StepLog {
    int t = 0;
    double z = 0.0;
    bool replanned = false;
    double reward_hat = 0.0;
    double cost_hat = 0.0;
    bool fallback = false;
    Eigen::VectorXd action;
    double r = 0.0;
    double c = 0.0;
    std::vector<int> unsafe_by_step;  // empty on steps without a new plan
};

struct EpisodeResult {
    double budget = 0.0;
    double reward = 0.0;  // discounted episodic sums under the true env
    double cost = 0.0;
    bool violation = false;
    std::vector<StepLog> steps;
};

EpisodeResult run_episode(const cmdp::Env& env, const diffusion::DiffusionModel& model, const guide::GuidePair& guides,
                          double budget, const PlannerConfig& config, Rng& rng,
                          PlannerKind kind = PlannerKind::kTrebi);

// One JSON object per line per step.
void write_step_log(std::ostream& out, const EpisodeResult& result);

}  // namespace trebi::planner

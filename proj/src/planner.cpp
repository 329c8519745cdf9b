#include "trebi/planner.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "trebi/errors.hpp"

namespace trebi::planner {

BudgetTracker::BudgetTracker(double budget, double gamma) : budget_(budget), gamma_(gamma), z_(budget) {
    if (std::isnan(budget)) throw std::invalid_argument("budget is NaN");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0,1]");
}

void BudgetTracker::update(double cost) {
    if (!(cost >= 0.0)) throw std::invalid_argument("step cost must be non-negative");
    z_ = (z_ - cost) / gamma_;
    ++t_;
}

std::string_view to_string(PlannerKind kind) {
    switch (kind) {
        case PlannerKind::kTrebi: return "trebi";
        case PlannerKind::kUnconstrained: return "unconstrained";
        case PlannerKind::kBehaviorSample: return "behavior";
    }
    return "?";
}

PlannerKind planner_kind_from_string(std::string_view name) {
    if (name == "trebi") return PlannerKind::kTrebi;
    if (name == "unconstrained") return PlannerKind::kUnconstrained;
    if (name == "behavior") return PlannerKind::kBehaviorSample;
    throw std::invalid_argument("unknown planner kind: " + std::string(name));
}

void PlannerConfig::validate() const {
    if (candidates < 1) throw std::invalid_argument("planner needs at least one candidate");
    if (replan_interval < 1) throw std::invalid_argument("replan interval must be >= 1");
    if (horizon < 0) throw std::invalid_argument("planner horizon must be >= 0");
    guide.validate();
}

namespace {

struct Draw {
    Eigen::MatrixXd tau;
    std::vector<int> unsafe_by_step;
};

Draw draw_candidates(const diffusion::DiffusionModel& model, const guide::GuidePair& guides,
                     const Eigen::VectorXd& first, double z, const PlannerConfig& config, Rng& rng, PlannerKind kind) {
    Draw d;
    d.unsafe_by_step.assign(static_cast<std::size_t>(model.schedule().steps()) + 1, 0);
    const double budget = kind == PlannerKind::kUnconstrained ? kUnconstrained : z;
    diffusion::GuidanceFn fn = [&](const Eigen::MatrixXd& tau_i, int i) {
        guide::Guidance g = guide::guidance_gradient(guides, tau_i, i, config.guide, budget);
        int unsafe = 0;
        for (bool u : g.unsafe) unsafe += u ? 1 : 0;
        d.unsafe_by_step[static_cast<std::size_t>(i)] = unsafe;
        return g.gradient;
    };
    const diffusion::GuidanceFn* guidance = kind == PlannerKind::kBehaviorSample ? nullptr : &fn;
    d.tau = model.sample(config.candidates, first, guidance, rng);
    return d;
}

}  // namespace

PlanResult plan(const diffusion::DiffusionModel& model, const guide::GuidePair& guides, const Eigen::VectorXd& state,
                double z, const PlannerConfig& config, Rng& rng, PlannerKind kind) {
    config.validate();
    if (config.horizon != 0 && config.horizon != model.layout().horizon)
        throw ShapeError("planner horizon " + std::to_string(config.horizon) + " does not match the model horizon " +
                         std::to_string(model.layout().horizon));
    if (std::isnan(z)) throw std::invalid_argument("budget is NaN");
    guides.check_compatible(model);
    const Eigen::VectorXd first = model.normalized_state_features(state);

    PlanResult out;
    Draw d;
    bool ok = false;
    for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
        try {
            d = draw_candidates(model, guides, first, z, config, rng, kind);
            ok = d.tau.allFinite();
        } catch (const GuidanceError&) {
            ok = false;
        }
        if (!ok) out.resamples = attempt + 1;
    }
    if (!ok) throw GuidanceError("candidate trajectories stayed non-finite after one resample");

    out.candidates = std::move(d.tau);
    out.unsafe_by_step = std::move(d.unsafe_by_step);
    const guide::GuidePair::Values v = guides.evaluate(out.candidates, 0);
    out.reward_hat = v.reward;
    out.cost_hat = v.cost;
    const Eigen::Index k_count = out.candidates.cols();

    if (kind == PlannerKind::kBehaviorSample) {
        out.chosen = rng.uniform_int(0, static_cast<int>(k_count) - 1);
    } else {
        const double budget = kind == PlannerKind::kUnconstrained ? kUnconstrained : z;
        int best = -1;
        for (Eigen::Index k = 0; k < k_count; ++k) {
            if (!(v.cost[k] <= budget)) continue;
            if (best < 0 || v.reward[k] > v.reward[best]) best = static_cast<int>(k);
        }
        if (best < 0) {
            out.fallback = true;
            Eigen::Index arg = 0;
            v.cost.minCoeff(&arg);
            best = static_cast<int>(arg);
        }
        out.chosen = best;
    }
    out.plan = traj::Trajectory::unflatten(
        model.normalizer().denormalize_flat(out.candidates.col(out.chosen), model.layout()), model.layout());
    return out;
}

Eigen::VectorXd plan_action(const diffusion::DiffusionModel& model, const traj::Trajectory& plan, int k) {
    if (k < 0 || k >= plan.horizon()) throw std::out_of_range("plan step out of range");
    Eigen::VectorXd a = model.encoder().decode_action(plan.actions.row(k).transpose());
    if (!model.spec().discrete) {
        const double lim = model.spec().action_limit;
        a = a.cwiseMax(-lim).cwiseMin(lim);
    }
    return a;
}

EpisodeResult run_episode(const cmdp::Env& env, const diffusion::DiffusionModel& model, const guide::GuidePair& guides,
                          double budget, const PlannerConfig& config, Rng& rng, PlannerKind kind) {
    config.validate();
    if (!(budget > 0.0)) throw std::invalid_argument("episode budget must be positive");
    if (env.spec().hash() != model.spec_hash())
        throw FormatError("diffusion model was trained for a different environment than '" + env.spec().name + "'");
    EpisodeResult res;
    res.budget = budget;
    BudgetTracker tracker(budget, env.spec().gamma);
    cmdp::EnvState state = env.reset(rng);
    PlanResult current;
    int offset = 0;
    double discount = 1.0;
    while (!state.done) {
        StepLog log;
        log.t = state.t;
        log.z = tracker.z();
        const bool need_plan = state.t % config.replan_interval == 0 || offset >= current.plan.horizon();
        if (need_plan) {
            current = plan(model, guides, state.s, tracker.z(), config, rng, kind);
            offset = 0;
            log.replanned = true;
            log.unsafe_by_step = current.unsafe_by_step;
        }
        log.reward_hat = current.reward_hat[current.chosen];
        log.cost_hat = current.cost_hat[current.chosen];
        log.fallback = current.fallback;
        log.action = plan_action(model, current.plan, offset);
        const cmdp::Transition tr = env.step(state, log.action, rng);
        ++offset;
        log.r = tr.r;
        log.c = tr.c;
        res.reward += discount * tr.r;
        res.cost += discount * tr.c;
        discount *= env.spec().gamma;
        tracker.update(tr.c);
        res.steps.push_back(std::move(log));
    }
    res.violation = res.cost > budget;
    return res;
}

void write_step_log(std::ostream& out, const EpisodeResult& result) {
    for (const StepLog& s : result.steps) {
        nlohmann::json j;
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
        out << j.dump() << '\n';
    }
}

}  // namespace trebi::planner

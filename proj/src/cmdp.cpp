#include "trebi/cmdp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "trebi/errors.hpp"
#include "trebi/util.hpp"

namespace trebi::cmdp {

void CmdpSpec::validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0,1]");
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (state_dim < 1 || action_dim < 1) throw std::invalid_argument("state/action dims must be >= 1");
    if (discrete && (num_states < 1 || num_actions < 1))
        throw std::invalid_argument("discrete spec needs state/action cardinalities");
    if (reward_bound < 0 || cost_bound < 0) throw std::invalid_argument("bounds must be non-negative");
}

std::string CmdpSpec::canonical() const {
    std::ostringstream s;
    s << name << '|' << discrete << '|' << deterministic << '|' << state_dim << '|' << action_dim << '|'
      << num_states << '|' << num_actions << '|' << format_double(gamma) << '|' << max_len << '|'
      << format_double(reward_bound) << '|' << format_double(cost_bound) << '|'
      << format_double(budget_max) << '|' << format_double(action_limit);
    return s.str();
}

std::uint64_t CmdpSpec::hash() const { return fnv1a(canonical()); }

Transition Env::step(EnvState& state, const Eigen::VectorXd& action, Rng& rng) const {
    if (state.done) throw UsageError("step() called on a finished episode");
    if (action.size() != spec_.action_dim) throw ShapeError("action has the wrong dimension");
    check_action(action);
    Outcome out = transition(state.s, action, rng);
    Transition tr;
    tr.s = state.s;
    tr.a = action;
    tr.s_next = out.s_next;
    tr.r = out.r;
    tr.c = out.c;
    state.s = std::move(out.s_next);
    state.t += 1;
    state.done = out.terminal || state.t >= spec_.max_len;
    tr.done = state.done;
    return tr;
}

// ---------------------------------------------------------------- GridBudget

namespace {

CmdpSpec grid_spec(const GridBudgetConfig& c) {
    CmdpSpec spec;
    spec.name = c.slip > 0.0 ? "grid_budget_slip" : "grid_budget";
    spec.discrete = true;
    spec.deterministic = c.slip == 0.0;
    spec.state_dim = 1;
    spec.action_dim = 1;
    spec.num_states = c.rows * c.cols;
    spec.num_actions = 4;
    spec.gamma = c.gamma;
    spec.max_len = c.max_len;
    spec.reward_bound = 1.0;
    spec.cost_bound = 1.0;
    spec.budget_max = static_cast<double>(c.max_len);
    spec.action_limit = 3.0;
    spec.validate();
    return spec;
}

}  // namespace

GridBudget::GridBudget(GridBudgetConfig config) : Env(grid_spec(config)), config_(std::move(config)) {
    const int n = config_.rows * config_.cols;
    if (config_.start_cells.empty()) throw std::invalid_argument("GridBudget needs a start cell");
    auto in_grid = [n](int c) { return c >= 0 && c < n; };
    if (!in_grid(config_.goal) || !std::all_of(config_.start_cells.begin(), config_.start_cells.end(), in_grid) ||
        !std::all_of(config_.hazards.begin(), config_.hazards.end(), in_grid))
        throw std::invalid_argument("GridBudget cell index out of range");
    if (config_.slip < 0.0 || config_.slip > 1.0) throw std::invalid_argument("slip must lie in [0,1]");
}

int GridBudget::neighbor(int cell, int move) const {
    int row = cell / config_.cols, col = cell % config_.cols;
    switch (move) {
        case kUp: row -= 1; break;
        case kDown: row += 1; break;
        case kLeft: col -= 1; break;
        case kRight: col += 1; break;
        default: throw std::invalid_argument("unknown move");
    }
    if (row < 0 || row >= config_.rows || col < 0 || col >= config_.cols) return cell;
    return row * config_.cols + col;
}

std::vector<std::pair<int, double>> GridBudget::next_distribution(int cell, int move) const {
    std::vector<std::pair<int, double>> out;
    auto add = [&out](int c, double p) {
        if (p <= 0.0) return;
        for (auto& [k, q] : out)
            if (k == c) {
                q += p;
                return;
            }
        out.emplace_back(c, p);
    };
    add(neighbor(cell, move), 1.0 - config_.slip);
    if (config_.slip > 0.0) {
        const bool vertical = move == kUp || move == kDown;
        add(neighbor(cell, vertical ? kLeft : kUp), 0.5 * config_.slip);
        add(neighbor(cell, vertical ? kRight : kDown), 0.5 * config_.slip);
    }
    return out;
}

bool GridBudget::is_hazard(int cell) const {
    return std::find(config_.hazards.begin(), config_.hazards.end(), cell) != config_.hazards.end();
}

double GridBudget::cost_on_arrival(int cell) const { return is_hazard(cell) ? 1.0 : 0.0; }

std::vector<double> GridBudget::start_distribution() const {
    std::vector<double> p(static_cast<std::size_t>(spec_.num_states), 0.0);
    for (int c : config_.start_cells) p[static_cast<std::size_t>(c)] += 1.0 / config_.start_cells.size();
    return p;
}

EnvState GridBudget::reset(Rng& rng) const {
    EnvState st;
    const int k = rng.uniform_int(0, static_cast<int>(config_.start_cells.size()) - 1);
    st.s = Eigen::VectorXd::Constant(1, config_.start_cells[static_cast<std::size_t>(k)]);
    return st;
}

void GridBudget::check_action(const Eigen::VectorXd& a) const {
    const double v = a[0];
    if (v != std::floor(v) || v < 0 || v >= spec_.num_actions)
        throw std::invalid_argument("GridBudget action must be an index in [0,4)");
}

Env::Outcome GridBudget::transition(const Eigen::VectorXd& s, const Eigen::VectorXd& a, Rng& rng) const {
    const int cell = static_cast<int>(s[0]);
    const int move = static_cast<int>(a[0]);
    int next = neighbor(cell, move);
    if (config_.slip > 0.0) {
        const double u = rng.uniform();
        if (u < config_.slip) {
            const bool vertical = move == kUp || move == kDown;
            const bool first = u < 0.5 * config_.slip;
            next = neighbor(cell, vertical ? (first ? kLeft : kRight) : (first ? kUp : kDown));
        }
    }
    return {Eigen::VectorXd::Constant(1, next), reward_on_arrival(next), cost_on_arrival(next), false};
}

// ---------------------------------------------------------------- ReachAvoid

namespace {

CmdpSpec reach_spec(const ReachAvoidConfig& c) {
    CmdpSpec spec;
    spec.name = "reach_avoid";
    spec.discrete = false;
    spec.deterministic = true;
    spec.state_dim = 2;
    spec.action_dim = 2;
    spec.gamma = c.gamma;
    spec.max_len = c.max_len;
    spec.reward_bound = 2.0 * std::sqrt(2.0);
    spec.cost_bound = c.hazard_penalty;
    spec.budget_max = c.hazard_penalty * c.max_len;
    spec.action_limit = 1.0;
    spec.validate();
    return spec;
}

}  // namespace

ReachAvoid::ReachAvoid(ReachAvoidConfig config) : Env(reach_spec(config)), config_(std::move(config)) {
    if (config_.hazard_radius <= 0 || config_.step_size <= 0)
        throw std::invalid_argument("ReachAvoid radius and step size must be positive");
}

double ReachAvoid::hazard_cost(const Eigen::Vector2d& p) const {
    const double d = (p - config_.hazard_center).norm();
    if (d >= config_.hazard_radius) return 0.0;
    const double u = 1.0 - (d / config_.hazard_radius) * (d / config_.hazard_radius);
    return config_.hazard_penalty * u * u;
}

double ReachAvoid::reward_at(const Eigen::Vector2d& p) const { return -(p - config_.goal).norm(); }

EnvState ReachAvoid::reset(Rng& rng) const {
    EnvState st;
    Eigen::Vector2d s = config_.start;
    if (config_.start_jitter > 0.0) {
        s.x() += rng.uniform(-config_.start_jitter, config_.start_jitter);
        s.y() += rng.uniform(-config_.start_jitter, config_.start_jitter);
    }
    st.s = s;
    return st;
}

void ReachAvoid::check_action(const Eigen::VectorXd& a) const {
    if (!a.allFinite()) throw std::invalid_argument("ReachAvoid action must be finite");
}

Env::Outcome ReachAvoid::transition(const Eigen::VectorXd& s, const Eigen::VectorXd& a, Rng& /*rng*/) const {
    const Eigen::Vector2d step = a.cwiseMax(-spec_.action_limit).cwiseMin(spec_.action_limit);
    const Eigen::Vector2d next = (Eigen::Vector2d(s) + config_.step_size * step).cwiseMax(-1.0).cwiseMin(1.0);
    return {next, reward_at(next), hazard_cost(next), false};
}

// ---------------------------------------------------------------- policies

std::string GridGreedyPolicy::tag() const { return "grid-greedy-eps" + format_double(epsilon_); }

int GridGreedyPolicy::greedy_move(int cell) const {
    const auto& c = env_.config();
    const int row = cell / c.cols, col = cell % c.cols;
    const int grow = c.goal / c.cols, gcol = c.goal % c.cols;
    if (col < gcol) return GridBudget::kRight;
    if (col > gcol) return GridBudget::kLeft;
    if (row > grow) return GridBudget::kUp;
    if (row < grow) return GridBudget::kDown;
    return GridBudget::kUp;  // at the goal; pushes into a wall when the goal is on the top row
}

Eigen::VectorXd GridGreedyPolicy::act(const EnvState& state, Rng& rng) {
    int move = greedy_move(static_cast<int>(state.s[0]));
    if (rng.bernoulli(epsilon_)) move = rng.uniform_int(0, 3);
    return Eigen::VectorXd::Constant(1, move);
}

std::string WaypointPolicy::tag() const {
    return "waypoint-speed" + format_double(speed_) + "-noise" + format_double(noise_std_) + "-spread" +
           format_double(spread_);
}

void WaypointPolicy::begin_episode(Rng& rng) {
    offset_ = rng.uniform(-spread_, spread_);
    passed_waypoint_ = false;
}

Eigen::VectorXd WaypointPolicy::act(const EnvState& state, Rng& rng) {
    const auto& c = env_.config();
    const Eigen::Vector2d s(state.s);
    const Eigen::Vector2d waypoint(c.hazard_center.x(), c.hazard_center.y() + offset_);
    if (s.x() >= waypoint.x() - 0.5 * c.step_size) passed_waypoint_ = true;
    const Eigen::Vector2d target = passed_waypoint_ ? c.goal : waypoint;
    Eigen::Vector2d a = (target - s) / c.step_size;
    if (a.norm() > speed_) a *= speed_ / a.norm();
    a.x() += noise_std_ * rng.normal();
    a.y() += noise_std_ * rng.normal();
    return a.cwiseMax(-1.0).cwiseMin(1.0);
}

// ---------------------------------------------------------------- datasets

std::size_t Dataset::transitions() const {
    std::size_t n = 0;
    for (const auto& ep : episodes) n += ep.steps.size();
    return n;
}

Dataset collect_dataset(const Env& env, BehaviorPolicy& policy, int episodes, Rng& rng) {
    if (episodes < 1) throw std::invalid_argument("collect_dataset needs at least one episode");
    Dataset data;
    data.env_name = env.spec().name;
    data.spec_hash = env.spec().hash();
    data.behavior = policy.tag();
    data.state_dim = env.spec().state_dim;
    data.action_dim = env.spec().action_dim;
    data.episodes.reserve(static_cast<std::size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        Episode ep;
        EnvState st = env.reset(rng);
        policy.begin_episode(rng);
        while (!st.done) ep.steps.push_back(env.step(st, policy.act(st, rng), rng));
        data.episodes.push_back(std::move(ep));
    }
    return data;
}

namespace {

void write_vec(std::ostream& out, const Eigen::VectorXd& v) {
    for (Eigen::Index k = 0; k < v.size(); ++k) out << format_double(v[k]) << ' ';
}

Eigen::VectorXd read_vec(std::istream& in, int n) {
    Eigen::VectorXd v(n);
    for (int k = 0; k < n; ++k) {
        std::string tok;
        if (!(in >> tok)) throw FormatError("dataset: truncated record");
        v[k] = std::strtod(tok.c_str(), nullptr);
    }
    return v;
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    std::ostringstream out;
    out << "trebi-dataset " << Dataset::kSchemaVersion << '\n'
        << "env " << data.env_name << '\n'
        << "spec_hash " << hex64(data.spec_hash) << '\n'
        << "behavior " << data.behavior << '\n'
        << "dims " << data.state_dim << ' ' << data.action_dim << '\n'
        << "episodes " << data.episodes.size() << '\n';
    for (std::size_t e = 0; e < data.episodes.size(); ++e) {
        const auto& ep = data.episodes[e];
        out << "episode " << e << ' ' << ep.steps.size() << '\n';
        for (const auto& tr : ep.steps) {
            write_vec(out, tr.s);
            write_vec(out, tr.a);
            write_vec(out, tr.s_next);
            out << format_double(tr.r) << ' ' << format_double(tr.c) << ' ' << (tr.done ? 1 : 0) << '\n';
        }
    }
    out << "end\n";
    write_file_atomic(path, out.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    Dataset data;
    std::string key, hash;
    int version = 0;
    if (!(in >> key >> version) || key != "trebi-dataset") throw FormatError("not a dataset file: " + path.string());
    if (version != Dataset::kSchemaVersion) throw FormatError("unsupported dataset schema version");
    auto expect = [&in](const char* k) {
        std::string got;
        in >> got;
        if (got != k) throw FormatError(std::string("dataset: expected '") + k + "', got '" + got + "'");
    };
    expect("env");
    in >> data.env_name;
    expect("spec_hash");
    in >> hash;
    data.spec_hash = std::stoull(hash, nullptr, 16);
    expect("behavior");
    in >> data.behavior;
    expect("dims");
    in >> data.state_dim >> data.action_dim;
    std::size_t count = 0;
    expect("episodes");
    in >> count;
    for (std::size_t e = 0; e < count; ++e) {
        std::size_t index = 0, len = 0;
        expect("episode");
        in >> index >> len;
        Episode ep;
        for (std::size_t k = 0; k < len; ++k) {
            Transition tr;
            tr.s = read_vec(in, data.state_dim);
            tr.a = read_vec(in, data.action_dim);
            tr.s_next = read_vec(in, data.state_dim);
            Eigen::VectorXd rc = read_vec(in, 3);
            tr.r = rc[0];
            tr.c = rc[1];
            tr.done = rc[2] != 0.0;
            ep.steps.push_back(std::move(tr));
        }
        data.episodes.push_back(std::move(ep));
    }
    expect("end");
    return data;
}

// ---------------------------------------------------------------- registry

std::unique_ptr<Env> make_env(std::string_view id) {
    if (id == "grid_budget") return std::make_unique<GridBudget>();
    if (id == "grid_budget_slip") {
        GridBudgetConfig c;
        c.slip = 0.1;
        return std::make_unique<GridBudget>(c);
    }
    if (id == "reach_avoid") return std::make_unique<ReachAvoid>();
    throw std::invalid_argument("unknown environment '" + std::string(id) + "'");
}

std::unique_ptr<BehaviorPolicy> make_behavior(std::string_view id, const Env& env) {
    if (auto* grid = dynamic_cast<const GridBudget*>(&env)) return std::make_unique<GridGreedyPolicy>(*grid, 0.3);
    if (auto* reach = dynamic_cast<const ReachAvoid*>(&env)) return std::make_unique<WaypointPolicy>(*reach);
    throw std::invalid_argument("no behavior policy for environment '" + std::string(id) + "'");
}

double episode_return(const Episode& ep, double gamma) {
    double total = 0.0, w = 1.0;
    for (const auto& tr : ep.steps) {
        total += w * tr.r;
        w *= gamma;
    }
    return total;
}

double episode_cost(const Episode& ep, double gamma) {
    double total = 0.0, w = 1.0;
    for (const auto& tr : ep.steps) {
        total += w * tr.c;
        w *= gamma;
    }
    return total;
}

}  // namespace trebi::cmdp

namespace trebi::cmdp {

void save_spec(std::ostream& out, const CmdpSpec& s) {
    out << "spec " << s.name << ' ' << s.discrete << ' ' << s.deterministic << ' ' << s.state_dim << ' '
        << s.action_dim << ' ' << s.num_states << ' ' << s.num_actions << ' ' << format_double(s.gamma) << ' '
        << s.max_len << ' ' << format_double(s.reward_bound) << ' ' << format_double(s.cost_bound) << ' '
        << format_double(s.budget_max) << ' ' << format_double(s.action_limit) << '\n';
}

CmdpSpec load_spec(std::istream& in) {
    CmdpSpec s;
    std::string key, gamma, rb, cb, bm, al;
    if (!(in >> key) || key != "spec") throw FormatError("expected spec line");
    in >> s.name >> s.discrete >> s.deterministic >> s.state_dim >> s.action_dim >> s.num_states >> s.num_actions >>
        gamma >> s.max_len >> rb >> cb >> bm >> al;
    if (!in) throw FormatError("truncated spec line");
    s.gamma = std::stod(gamma);
    s.reward_bound = std::stod(rb);
    s.cost_bound = std::stod(cb);
    s.budget_max = std::stod(bm);
    s.action_limit = std::stod(al);
    s.validate();
    return s;
}

}  // namespace trebi::cmdp

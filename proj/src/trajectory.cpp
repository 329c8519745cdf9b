#include "trebi/trajectory.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "trebi/errors.hpp"

namespace trebi::traj {

Eigen::VectorXd Trajectory::flatten() const {
    const Layout l = layout();
    Eigen::VectorXd flat(l.size());
    for (int t = 0; t < l.horizon; ++t) {
        flat.segment(l.state_offset(t), l.state_features) = states.row(t).transpose();
        flat.segment(l.action_offset(t), l.action_features) = actions.row(t).transpose();
    }
    return flat;
}

Trajectory Trajectory::unflatten(const Eigen::VectorXd& flat, const Layout& l) {
    if (flat.size() != l.size()) throw ShapeError("flattened trajectory has the wrong length");
    Trajectory tr;
    tr.states.resize(l.horizon, l.state_features);
    tr.actions.resize(l.horizon, l.action_features);
    for (int t = 0; t < l.horizon; ++t) {
        tr.states.row(t) = flat.segment(l.state_offset(t), l.state_features).transpose();
        tr.actions.row(t) = flat.segment(l.action_offset(t), l.action_features).transpose();
    }
    return tr;
}

double discounted_return(std::span<const double> rewards, double gamma) {
    double total = 0.0, w = 1.0;
    for (double r : rewards) {
        total += w * r;
        w *= gamma;
    }
    return total;
}

double discounted_cost(std::span<const double> costs, double gamma) {
    for (double c : costs)
        if (c < 0.0) throw std::invalid_argument("costs must be non-negative");
    return discounted_return(costs, gamma);
}

// ------------------------------------------------------------------ Encoder

Encoder::Encoder(const cmdp::CmdpSpec& spec)
    : discrete_(spec.discrete),
      raw_state_dim_(spec.state_dim),
      raw_action_dim_(spec.action_dim),
      state_features_(spec.discrete ? spec.num_states : spec.state_dim),
      action_features_(spec.discrete ? spec.num_actions : spec.action_dim) {}

namespace {

Eigen::VectorXd one_hot(double index, int n) {
    const int k = static_cast<int>(index);
    if (k < 0 || k >= n) throw ShapeError("discrete index out of range for one-hot encoding");
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    v[k] = 1.0;
    return v;
}

Eigen::VectorXd arg_max(const Eigen::VectorXd& v) {
    Eigen::Index k = 0;
    v.maxCoeff(&k);
    return Eigen::VectorXd::Constant(1, static_cast<double>(k));
}

}  // namespace

Eigen::VectorXd Encoder::encode_state(const Eigen::VectorXd& raw) const {
    if (raw.size() != raw_state_dim_) throw ShapeError("raw state has the wrong dimension");
    return discrete_ ? one_hot(raw[0], state_features_) : raw;
}

Eigen::VectorXd Encoder::encode_action(const Eigen::VectorXd& raw) const {
    if (raw.size() != raw_action_dim_) throw ShapeError("raw action has the wrong dimension");
    return discrete_ ? one_hot(raw[0], action_features_) : raw;
}

Eigen::VectorXd Encoder::decode_state(const Eigen::VectorXd& f) const {
    if (f.size() != state_features_) throw ShapeError("state features have the wrong dimension");
    return discrete_ ? arg_max(f) : f;
}

Eigen::VectorXd Encoder::decode_action(const Eigen::VectorXd& f) const {
    if (f.size() != action_features_) throw ShapeError("action features have the wrong dimension");
    return discrete_ ? arg_max(f) : f;
}

// --------------------------------------------------------------- Normalizer

Normalizer Normalizer::fit(const Eigen::MatrixXd& points) {
    if (points.rows() == 0) throw std::invalid_argument("cannot fit a normalizer to no points");
    Normalizer n;
    const Eigen::VectorXd lo = points.colwise().minCoeff().transpose();
    const Eigen::VectorXd hi = points.colwise().maxCoeff().transpose();
    n.center_ = 0.5 * (lo + hi);
    n.half_range_ = 0.5 * (hi - lo);
    for (Eigen::Index k = 0; k < n.half_range_.size(); ++k)
        if (n.half_range_[k] <= 0.0) n.half_range_[k] = 1.0;
    return n;
}

Eigen::VectorXd Normalizer::normalize(const Eigen::VectorXd& x) const {
    if (x.size() != center_.size()) throw ShapeError("normalizer dimension mismatch");
    return ((x - center_).array() / half_range_.array()).matrix();
}

Eigen::VectorXd Normalizer::denormalize(const Eigen::VectorXd& x) const {
    if (x.size() != center_.size()) throw ShapeError("normalizer dimension mismatch");
    return (x.array() * half_range_.array()).matrix() + center_;
}

void Normalizer::save(std::ostream& out) const {
    out << "normalizer " << center_.size() << std::hexfloat;
    for (Eigen::Index k = 0; k < center_.size(); ++k) out << ' ' << center_[k] << ' ' << half_range_[k];
    out << std::defaultfloat << '\n';
}

Normalizer Normalizer::load(std::istream& in) {
    std::string key;
    Eigen::Index n = 0;
    if (!(in >> key >> n) || key != "normalizer") throw FormatError("expected normalizer block");
    Normalizer out;
    out.center_.resize(n);
    out.half_range_.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        std::string c, h;
        in >> c >> h;
        out.center_[k] = std::strtod(c.c_str(), nullptr);
        out.half_range_[k] = std::strtod(h.c_str(), nullptr);
    }
    if (!in) throw FormatError("truncated normalizer block");
    return out;
}

Eigen::VectorXd TrajectoryNormalizer::normalize_flat(const Eigen::VectorXd& flat, const Layout& l) const {
    if (flat.size() != l.size()) throw ShapeError("flattened trajectory has the wrong length");
    Eigen::VectorXd out(flat.size());
    for (int t = 0; t < l.horizon; ++t) {
        out.segment(l.state_offset(t), l.state_features) =
            states.normalize(flat.segment(l.state_offset(t), l.state_features));
        out.segment(l.action_offset(t), l.action_features) =
            actions.normalize(flat.segment(l.action_offset(t), l.action_features));
    }
    return out;
}

Eigen::VectorXd TrajectoryNormalizer::denormalize_flat(const Eigen::VectorXd& flat, const Layout& l) const {
    if (flat.size() != l.size()) throw ShapeError("flattened trajectory has the wrong length");
    Eigen::VectorXd out(flat.size());
    for (int t = 0; t < l.horizon; ++t) {
        out.segment(l.state_offset(t), l.state_features) =
            states.denormalize(flat.segment(l.state_offset(t), l.state_features));
        out.segment(l.action_offset(t), l.action_features) =
            actions.denormalize(flat.segment(l.action_offset(t), l.action_features));
    }
    return out;
}

void TrajectoryNormalizer::save(std::ostream& out) const {
    states.save(out);
    actions.save(out);
}

TrajectoryNormalizer TrajectoryNormalizer::load(std::istream& in) {
    TrajectoryNormalizer n;
    n.states = Normalizer::load(in);
    n.actions = Normalizer::load(in);
    return n;
}

TrajectoryNormalizer fit_normalizer(const cmdp::Dataset& data, const Encoder& encoder) {
    const auto n = static_cast<Eigen::Index>(data.transitions());
    if (n == 0) throw std::invalid_argument("cannot fit a normalizer to an empty dataset");
    Eigen::MatrixXd s(n, encoder.state_features()), a(n, encoder.action_features());
    Eigen::Index row = 0;
    for (const auto& ep : data.episodes)
        for (const auto& tr : ep.steps) {
            s.row(row) = encoder.encode_state(tr.s).transpose();
            a.row(row) = encoder.encode_action(tr.a).transpose();
            ++row;
        }
    return {Normalizer::fit(s), Normalizer::fit(a)};
}

std::vector<Window> make_windows(const cmdp::Dataset& data, const Encoder& encoder, int horizon, double gamma) {
    if (horizon < 1) throw std::invalid_argument("window horizon must be >= 1");
    std::vector<Window> out;
    for (std::size_t e = 0; e < data.episodes.size(); ++e) {
        const auto& steps = data.episodes[e].steps;
        const int len = static_cast<int>(steps.size());
        if (len < horizon) continue;
        std::vector<double> r(steps.size()), c(steps.size());
        for (int k = 0; k < len; ++k) {
            r[k] = steps[k].r;
            c[k] = steps[k].c;
        }
        // suffix sums: to_go[k] = sum_{j>=k} gamma^{j-k} x_j
        std::vector<double> r_to_go(steps.size() + 1, 0.0), c_to_go(steps.size() + 1, 0.0);
        for (int k = len - 1; k >= 0; --k) {
            r_to_go[k] = r[k] + gamma * r_to_go[k + 1];
            c_to_go[k] = c[k] + gamma * c_to_go[k + 1];
        }
        for (int start = 0; start + horizon <= len; ++start) {
            Window w;
            w.episode = static_cast<int>(e);
            w.start = start;
            w.traj.states.resize(horizon, encoder.state_features());
            w.traj.actions.resize(horizon, encoder.action_features());
            for (int t = 0; t < horizon; ++t) {
                const auto& tr = steps[static_cast<std::size_t>(start + t)];
                w.traj.states.row(t) = encoder.encode_state(tr.s).transpose();
                w.traj.actions.row(t) = encoder.encode_action(tr.a).transpose();
                w.rewards.push_back(tr.r);
                w.costs.push_back(tr.c);
                if (tr.done && t + 1 < horizon) w.interior_done = true;
            }
            w.reward_to_go = r_to_go[start];
            w.cost_to_go = c_to_go[start];
            out.push_back(std::move(w));
        }
    }
    if (out.empty()) throw std::invalid_argument("window horizon exceeds every episode length");
    return out;
}

}  // namespace trebi::traj

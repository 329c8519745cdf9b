#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "trebi/cmdp.hpp"

namespace trebi::traj {

// Flattened window layout: time-major, the state block then the action block
// for each step. Entry k of step t lives at t * step_width() + k.
struct Layout {
    int horizon = 1;
    int state_features = 1;
    int action_features = 1;

    int step_width() const { return state_features + action_features; }
    int size() const { return horizon * step_width(); }
    int state_offset(int t) const { return t * step_width(); }
    int action_offset(int t) const { return t * step_width() + state_features; }
    bool operator==(const Layout&) const = default;
};

struct Trajectory {
    Eigen::MatrixXd states;   // horizon x state_features
    Eigen::MatrixXd actions;  // horizon x action_features

    int horizon() const { return static_cast<int>(states.rows()); }
    Layout layout() const {
        return {horizon(), static_cast<int>(states.cols()), static_cast<int>(actions.cols())};
    }
    Eigen::VectorXd flatten() const;
    static Trajectory unflatten(const Eigen::VectorXd& flat, const Layout& layout);
};

// sum_t gamma^t x_t over the whole sequence.
double discounted_return(std::span<const double> rewards, double gamma);
// Same sum for costs; throws std::invalid_argument on a negative cost.
double discounted_cost(std::span<const double> costs, double gamma);

// Raw env vectors <-> model features. Continuous envs pass through; discrete
// envs use one-hot codes, decoded by argmax.
class Encoder {
public:
    Encoder() = default;
    explicit Encoder(const cmdp::CmdpSpec& spec);

    int state_features() const { return state_features_; }
    int action_features() const { return action_features_; }

    Eigen::VectorXd encode_state(const Eigen::VectorXd& raw) const;
    Eigen::VectorXd encode_action(const Eigen::VectorXd& raw) const;
    Eigen::VectorXd decode_state(const Eigen::VectorXd& features) const;
    Eigen::VectorXd decode_action(const Eigen::VectorXd& features) const;

private:
    bool discrete_ = false;
    int raw_state_dim_ = 1, raw_action_dim_ = 1;
    int state_features_ = 1, action_features_ = 1;
};

// Per-dimension affine map of the fitted [min, max] range onto [-1, 1].
class Normalizer {
public:
    Normalizer() = default;
    static Normalizer fit(const Eigen::MatrixXd& points);  // one point per row

    int dims() const { return static_cast<int>(center_.size()); }
    Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;
    Eigen::VectorXd denormalize(const Eigen::VectorXd& x) const;
    const Eigen::VectorXd& center() const { return center_; }
    const Eigen::VectorXd& half_range() const { return half_range_; }

    void save(std::ostream& out) const;
    static Normalizer load(std::istream& in);

private:
    Eigen::VectorXd center_;
    Eigen::VectorXd half_range_;
};

// Separate state and action normalizers applied blockwise to flattened windows.
struct TrajectoryNormalizer {
    Normalizer states;
    Normalizer actions;

    Eigen::VectorXd normalize_flat(const Eigen::VectorXd& flat, const Layout& layout) const;
    Eigen::VectorXd denormalize_flat(const Eigen::VectorXd& flat, const Layout& layout) const;

    void save(std::ostream& out) const;
    static TrajectoryNormalizer load(std::istream& in);
};

// A length-H segment of one episode, in (unnormalized) feature space, with
// Monte-Carlo to-go labels from the window start to the end of its episode.
struct Window {
    Trajectory traj;
    std::vector<double> rewards;  // per step inside the window
    std::vector<double> costs;
    double reward_to_go = 0.0;
    double cost_to_go = 0.0;
    int episode = 0;
    int start = 0;
    bool interior_done = false;  // a done flag before the window's last step
};

TrajectoryNormalizer fit_normalizer(const cmdp::Dataset& data, const Encoder& encoder);

// Every contiguous length-H segment that stays inside one episode. Throws
// std::invalid_argument if no episode is at least H long.
std::vector<Window> make_windows(const cmdp::Dataset& data, const Encoder& encoder, int horizon, double gamma);

}  // namespace trebi::traj

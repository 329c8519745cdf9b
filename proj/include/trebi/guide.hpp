#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Core>

#include "trebi/diffusion.hpp"
#include "trebi/nn.hpp"
#include "trebi/trajectory.hpp"

namespace trebi::guide {

// alpha scales the whole log-guide; n weighs budget overshoot.
struct GuideConfig {
    double alpha = 0.1;
    double n = 100.0;

    void validate() const;
};

struct GuideNetConfig {
    std::vector<int> hidden{128, 128};
    nn::Activation activation = nn::Activation::kTanh;
};

// Reward-to-go and cost-to-go estimators over noised trajectories. Both heads
// read the normalized flattened trajectory stacked over the step embedding;
// the cost head ends in a softplus so its estimate is never negative.
class GuidePair {
public:
    struct Values {
        Eigen::RowVectorXd reward;
        Eigen::RowVectorXd cost;
    };
    struct ValuesAndGrads {
        Eigen::RowVectorXd reward;
        Eigen::RowVectorXd cost;
        Eigen::MatrixXd reward_grad;  // D x batch, w.r.t. the trajectory only
        Eigen::MatrixXd cost_grad;
    };

    GuidePair() = default;
    GuidePair(const diffusion::DiffusionModel& model, const GuideNetConfig& config, Rng& rng);

    Values evaluate(const Eigen::MatrixXd& tau, int i) const;
    ValuesAndGrads evaluate_with_grad(const Eigen::MatrixXd& tau, int i) const;

    // Affine output maps fitted to the training labels.
    void set_label_scales(double reward_offset, double reward_scale, double cost_scale);
    double reward_offset() const { return reward_offset_; }
    double reward_scale() const { return reward_scale_; }
    double cost_scale() const { return cost_scale_; }

    nn::Mlp& reward_head() { return reward_head_; }
    nn::Mlp& cost_head() { return cost_head_; }
    const nn::Mlp& reward_head() const { return reward_head_; }
    const nn::Mlp& cost_head() const { return cost_head_; }
    const traj::Layout& layout() const { return layout_; }
    int embed_dims() const { return embed_dims_; }
    int diffusion_steps() const { return diffusion_steps_; }
    std::uint64_t spec_hash() const { return spec_hash_; }

    Eigen::MatrixXd head_input(const Eigen::MatrixXd& tau, int i) const;

    // Throws FormatError unless the pair was trained for this model's env and layout.
    void check_compatible(const diffusion::DiffusionModel& model) const;

    void save(std::ostream& out) const;
    static GuidePair load(std::istream& in);

private:
    std::uint64_t spec_hash_ = 0;
    traj::Layout layout_;
    int embed_dims_ = 16;
    int diffusion_steps_ = 1;
    double reward_offset_ = 0.0;
    double reward_scale_ = 1.0;
    double cost_scale_ = 1.0;
    nn::Mlp reward_head_;
    nn::Mlp cost_head_;
};

struct GuideTrainConfig {
    int epochs = 10;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double final_lr_fraction = 1.0;
    // Inputs keep the first state un-noised, as the planner conditions on it.
    bool clean_first_state = true;
    // Share of training draws at i = 0 (the clean trajectory the planner ranks
    // candidates on); other draws are uniform over 1..N.
    double clean_fraction = 0.25;
};

struct GuideLossCurves {
    std::vector<double> reward;
    std::vector<double> cost;
};

// Regresses both heads on Monte-Carlo to-go labels from noised windows at a
// random step i in {0, ..., N} (i = 0 is the clean window).
GuideLossCurves train_guides(GuidePair& pair, const std::vector<traj::Window>& windows,
                             const traj::TrajectoryNormalizer& normalizer, const diffusion::NoiseSchedule& schedule,
                             const GuideTrainConfig& config, Rng& rng);

// R~_{b,n} = R - n * [C > b] * (C - b). Budget equality counts as safe.
double smoothed_objective(double reward, double cost, const GuideConfig& config, double budget);

struct Guidance {
    Eigen::MatrixXd gradient;  // D x batch
    Eigen::RowVectorXd reward;
    Eigen::RowVectorXd cost;
    std::vector<bool> unsafe;  // branch taken per column
};

// g_b = alpha * grad R            when C(tau_i) <= b
//     = alpha * (grad R - n grad C) otherwise.
// A budget of +infinity always takes the first branch.
Guidance guidance_gradient(const GuidePair& pair, const Eigen::MatrixXd& tau_i, int i, const GuideConfig& config,
                           double budget);
Eigen::VectorXd guidance_gradient(const GuidePair& pair, const Eigen::VectorXd& tau_i, int i,
                                  const GuideConfig& config, double budget);

}  // namespace trebi::guide

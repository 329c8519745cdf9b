#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "trebi/nn.hpp"
#include "trebi/rng.hpp"
#include "trebi/trajectory.hpp"

namespace trebi::diffusion {

// Which fixed variance the reverse step uses: the forward-process beta_i, or
// the true posterior variance beta~_i of q(tau^{i-1} | tau^i, tau^0).
enum class ReverseVariance : std::uint8_t { kBeta, kPosterior };

// Fixed forward-noising schedule over steps i = 1..N. alpha_bar(0) = 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> betas, ReverseVariance variance = ReverseVariance::kBeta);
    // Cosine schedule: alpha_bar(i) ~ cos^2(((i/N) + s) / (1 + s) * pi/2).
    static NoiseSchedule cosine(int steps, ReverseVariance variance = ReverseVariance::kBeta, double offset = 0.008,
                                double max_beta = 0.999);

    int steps() const { return static_cast<int>(betas_.size()); }
    ReverseVariance variance_kind() const { return variance_; }
    double beta(int i) const;
    double alpha_bar(int i) const;
    double signal_coef(int i) const;
    double noise_coef(int i) const;
    // beta~_i = beta_i (1 - alpha_bar(i-1)) / (1 - alpha_bar(i)); zero at i = 1.
    double posterior_variance(int i) const;
    // Sigma^i of the reverse step, per variance_kind(). The posterior choice
    // replaces its zero at i = 1 by the i = 2 value.
    double reverse_variance(int i) const;
    double posterior_coef_x0(int i) const;
    double posterior_coef_xt(int i) const;

    const std::vector<double>& betas() const { return betas_; }

    void save(std::ostream& out) const;
    static NoiseSchedule load(std::istream& in);

private:
    void check_step(int i) const;

    std::vector<double> betas_;
    ReverseVariance variance_ = ReverseVariance::kBeta;
    std::vector<double> alpha_bar_;  // index 0..N
    std::vector<double> posterior_var_;
};

// Sinusoidal features of the diffusion step.
Eigen::VectorXd step_embedding(int i, int dims);

struct NoisedSample {
    Eigen::VectorXd tau_i;
    Eigen::VectorXd noise;
};

// tau_i = signal_coef(i) * tau0 + noise_coef(i) * noise, noise ~ N(0, I).
NoisedSample add_noise(const NoiseSchedule& schedule, const Eigen::VectorXd& tau0, int i, Rng& rng);

// Overwrites the first-state block of a normalized flattened trajectory.
Eigen::VectorXd overwrite_first_state(const Eigen::VectorXd& tau, const Eigen::VectorXd& state_features,
                                      const traj::Layout& layout);

struct DenoiserConfig {
    std::vector<int> hidden{256, 256};
    nn::Activation activation = nn::Activation::kSilu;
    int embed_dims = 16;
    bool clip_denoised = true;
};

// Gradient added to the reverse mean, evaluated on tau_i (columns are samples).
using GuidanceFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& tau_i, int i)>;

class DiffusionModel {
public:
    DiffusionModel() = default;
    DiffusionModel(const cmdp::CmdpSpec& spec, const traj::Layout& layout, NoiseSchedule schedule,
                   traj::TrajectoryNormalizer normalizer, const DenoiserConfig& config, Rng& rng);

    const traj::Layout& layout() const { return layout_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const traj::TrajectoryNormalizer& normalizer() const { return normalizer_; }
    const traj::Encoder& encoder() const { return encoder_; }
    const DenoiserConfig& config() const { return config_; }
    const nn::Mlp& denoiser() const { return denoiser_; }
    nn::Mlp& denoiser() { return denoiser_; }
    std::uint64_t spec_hash() const { return spec_hash_; }
    const cmdp::CmdpSpec& spec() const { return spec_; }
    int dim() const { return layout_.size(); }

    // Denoiser input: noisy trajectories stacked over the step embedding.
    Eigen::MatrixXd denoiser_input(const Eigen::MatrixXd& tau_i, int i) const;
    Eigen::MatrixXd predict_noise(const Eigen::MatrixXd& tau_i, int i) const;
    // mu_theta(tau_i, i) via the predicted clean trajectory and the posterior mean.
    Eigen::MatrixXd posterior_mean(const Eigen::MatrixXd& tau_i, int i) const;

    // One reverse step: N(mu + Sigma^i g, Sigma^i) with Sigma^i = schedule().reverse_variance(i);
    // deterministic at i = 1.
    // guidance may be null (g = 0). Throws GuidanceError on non-finite g.
    Eigen::MatrixXd reverse_step(const Eigen::MatrixXd& tau_i, int i, const Eigen::MatrixXd* guidance,
                                 Rng& rng) const;
    Eigen::VectorXd reverse_step(const Eigen::VectorXd& tau_i, int i, const Eigen::VectorXd* guidance,
                                 Rng& rng) const;

    // Encodes and normalizes a raw env state, then overwrites the first-state block.
    Eigen::VectorXd condition_first_state(const Eigen::VectorXd& tau, const Eigen::VectorXd& raw_state) const;
    Eigen::VectorXd normalized_state_features(const Eigen::VectorXd& raw_state) const;

    // Full reverse chain from tau^N ~ N(0, I) (or `init`, D x count). When
    // first_state (normalized features; one column shared by all samples or
    // one per sample) is set it is imposed after every step.
    Eigen::MatrixXd sample(int count, const std::optional<Eigen::MatrixXd>& first_state, const GuidanceFn* guidance,
                           Rng& rng, const Eigen::MatrixXd* init = nullptr) const;

    void save(std::ostream& out) const;
    static DiffusionModel load(std::istream& in);

private:
    cmdp::CmdpSpec spec_;
    std::uint64_t spec_hash_ = 0;
    traj::Layout layout_;
    traj::Encoder encoder_;
    NoiseSchedule schedule_;
    traj::TrajectoryNormalizer normalizer_;
    DenoiserConfig config_;
    nn::Mlp denoiser_;
};

struct TrainConfig {
    int epochs = 10;
    int batch_size = 64;
    double learning_rate = 1e-3;
    // Linear decay of the learning rate down to this fraction by the last epoch.
    double final_lr_fraction = 1.0;
    // Keep the first-state block un-noised in training inputs, matching conditioned sampling.
    bool clean_first_state = true;
};

// Noise-prediction MSE training on normalized flattened windows (one per
// column). Returns the mean loss of each epoch.
std::vector<double> train(DiffusionModel& model, const Eigen::MatrixXd& windows, const TrainConfig& config, Rng& rng);

// Mean noise-prediction loss over one pass with fresh (i, noise) draws; no update.
double evaluate_loss(const DiffusionModel& model, const Eigen::MatrixXd& windows, Rng& rng,
                     bool clean_first_state = false);

// Normalized flattened windows, one per column.
Eigen::MatrixXd window_matrix(const std::vector<traj::Window>& windows, const traj::TrajectoryNormalizer& normalizer);

}  // namespace trebi::diffusion

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "trebi/rng.hpp"

namespace trebi::nn {

enum class Activation : std::uint8_t { kIdentity, kTanh, kSilu, kSoftplus };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

// Dense feed-forward network. Batched calls take one sample per column.
class Mlp {
public:
    struct Gradients {
        std::vector<Eigen::MatrixXd> weights;
        std::vector<Eigen::VectorXd> biases;
    };

    Mlp() = default;
    // Zero-initialised parameters.
    Mlp(std::vector<int> layer_sizes, Activation hidden, Activation output = Activation::kIdentity);

    // Glorot-uniform weights, zero biases.
    static Mlp random(std::vector<int> layer_sizes, Activation hidden, Rng& rng,
                      Activation output = Activation::kIdentity);

    int input_dim() const { return layer_sizes_.front(); }
    int output_dim() const { return layer_sizes_.back(); }
    int num_layers() const { return static_cast<int>(weights_.size()); }
    const std::vector<int>& layer_sizes() const { return layer_sizes_; }
    Activation hidden_activation() const { return hidden_; }
    Activation output_activation() const { return output_; }

    std::vector<Eigen::MatrixXd>& weights() { return weights_; }
    const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
    std::vector<Eigen::VectorXd>& biases() { return biases_; }
    const std::vector<Eigen::VectorXd>& biases() const { return biases_; }

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x) const;

    // d(cotangent . forward(x)) / dx.
    Eigen::VectorXd grad_input(const Eigen::VectorXd& x, const Eigen::VectorXd& cotangent) const;
    Eigen::MatrixXd grad_input_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cotangent) const;

    // Forward plus input gradient for scalar-output heads, sharing one forward pass.
    // Returns outputs (1 x batch) and writes d out / d x into grad (input_dim x batch).
    Eigen::RowVectorXd value_and_grad_batch(const Eigen::MatrixXd& x, Eigen::MatrixXd& grad) const;

    // Mean squared error over all output entries and its parameter gradient.
    double mse_and_gradients(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                             Gradients& grads) const;

    std::size_t parameter_count() const;
    Eigen::VectorXd flat_parameters() const;
    void set_flat_parameters(const Eigen::VectorXd& flat);
    bool all_finite() const;

    void save(std::ostream& out) const;
    static Mlp load(std::istream& in);

private:
    struct Cache {
        std::vector<Eigen::MatrixXd> pre;   // per layer pre-activation
        std::vector<Eigen::MatrixXd> post;  // post[0] = input
    };

    void check_input(Eigen::Index rows) const;
    Eigen::MatrixXd run(const Eigen::MatrixXd& x, Cache* cache) const;
    // Back-propagates d loss / d output; fills grads if non-null; returns d loss / d input.
    Eigen::MatrixXd backprop(const Cache& cache, Eigen::MatrixXd delta, Gradients* grads) const;

    std::vector<int> layer_sizes_;
    Activation hidden_ = Activation::kTanh;
    Activation output_ = Activation::kIdentity;
    std::vector<Eigen::MatrixXd> weights_;  // out x in
    std::vector<Eigen::VectorXd> biases_;
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam moment accumulators shaped like the network they were built for.
class OptimizerState {
public:
    OptimizerState() = default;
    OptimizerState(const Mlp& net, AdamConfig config = {});

    void apply(Mlp& net, const Mlp::Gradients& grads);

    const AdamConfig& config() const { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    std::int64_t step() const { return step_; }

private:
    AdamConfig config_;
    std::int64_t step_ = 0;
    std::vector<Eigen::MatrixXd> m_w_, v_w_;
    std::vector<Eigen::VectorXd> m_b_, v_b_;
};

// One Adam step on the squared-error loss; returns the pre-update mean loss.
// Throws TrainingDivergence on a non-finite loss.
double train_step(Mlp& net, OptimizerState& opt, const Eigen::MatrixXd& inputs,
                  const Eigen::MatrixXd& targets);

}  // namespace trebi::nn

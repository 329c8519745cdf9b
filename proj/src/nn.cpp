#include "trebi/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "trebi/errors.hpp"

namespace trebi::nn {
namespace {

constexpr const char* kMagic = "trebi-mlp";
constexpr int kFormatVersion = 1;

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

void apply_activation(Activation a, const Eigen::MatrixXd& z, Eigen::MatrixXd& out) {
    switch (a) {
        case Activation::kIdentity: out = z; break;
        case Activation::kTanh: out = z.array().tanh().matrix(); break;
        case Activation::kSilu: out = z.unaryExpr([](double v) { return v * sigmoid(v); }); break;
        case Activation::kSoftplus: out = z.unaryExpr([](double v) { return softplus(v); }); break;
    }
}

// Multiplies delta in place by the activation derivative at (z, y=act(z)).
void scale_by_derivative(Activation a, const Eigen::MatrixXd& z, const Eigen::MatrixXd& y,
                         Eigen::MatrixXd& delta) {
    switch (a) {
        case Activation::kIdentity: break;
        case Activation::kTanh: delta.array() *= 1.0 - y.array().square(); break;
        case Activation::kSilu:
            delta.array() *= z.unaryExpr([](double v) {
                const double s = sigmoid(v);
                return s * (1.0 + v * (1.0 - s));
            }).array();
            break;
        case Activation::kSoftplus:
            delta.array() *= z.unaryExpr([](double v) { return sigmoid(v); }).array();
            break;
    }
}

}  // namespace

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::kIdentity: return "identity";
        case Activation::kTanh: return "tanh";
        case Activation::kSilu: return "silu";
        case Activation::kSoftplus: return "softplus";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name) {
    if (name == "identity") return Activation::kIdentity;
    if (name == "tanh") return Activation::kTanh;
    if (name == "silu") return Activation::kSilu;
    if (name == "softplus") return Activation::kSoftplus;
    throw FormatError("unknown activation '" + std::string(name) + "'");
}

Mlp::Mlp(std::vector<int> layer_sizes, Activation hidden, Activation output)
    : layer_sizes_(std::move(layer_sizes)), hidden_(hidden), output_(output) {
    if (layer_sizes_.size() < 2) throw ShapeError("Mlp needs at least an input and an output size");
    for (int s : layer_sizes_)
        if (s <= 0) throw ShapeError("Mlp layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
        weights_.push_back(Eigen::MatrixXd::Zero(layer_sizes_[l + 1], layer_sizes_[l]));
        biases_.push_back(Eigen::VectorXd::Zero(layer_sizes_[l + 1]));
    }
}

Mlp Mlp::random(std::vector<int> layer_sizes, Activation hidden, Rng& rng, Activation output) {
    Mlp net(std::move(layer_sizes), hidden, output);
    for (auto& w : net.weights_) {
        const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
        for (Eigen::Index c = 0; c < w.cols(); ++c)
            for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-limit, limit);
    }
    return net;
}

void Mlp::check_input(Eigen::Index rows) const {
    if (weights_.empty()) throw UsageError("Mlp is empty");
    if (rows != input_dim()) {
        std::ostringstream msg;
        msg << "Mlp input has " << rows << " rows, expected " << input_dim();
        throw ShapeError(msg.str());
    }
}

Eigen::MatrixXd Mlp::run(const Eigen::MatrixXd& x, Cache* cache) const {
    check_input(x.rows());
    Eigen::MatrixXd a = x;
    if (cache) {
        cache->pre.clear();
        cache->post.assign(1, x);
    }
    for (int l = 0; l < num_layers(); ++l) {
        Eigen::MatrixXd z = weights_[l] * a;
        z.colwise() += biases_[l];
        const Activation act = (l + 1 == num_layers()) ? output_ : hidden_;
        apply_activation(act, z, a);
        if (cache) {
            cache->pre.push_back(std::move(z));
            cache->post.push_back(a);
        }
    }
    return a;
}

Eigen::MatrixXd Mlp::backprop(const Cache& cache, Eigen::MatrixXd delta, Gradients* grads) const {
    if (grads) {
        grads->weights.resize(weights_.size());
        grads->biases.resize(biases_.size());
    }
    for (int l = num_layers() - 1; l >= 0; --l) {
        const Activation act = (l + 1 == num_layers()) ? output_ : hidden_;
        scale_by_derivative(act, cache.pre[l], cache.post[l + 1], delta);
        if (grads) {
            grads->weights[l].noalias() = delta * cache.post[l].transpose();
            grads->biases[l] = delta.rowwise().sum();
        }
        Eigen::MatrixXd next = weights_[l].transpose() * delta;
        delta = std::move(next);
    }
    return delta;
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const { return run(x, nullptr).col(0); }

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& x) const { return run(x, nullptr); }

Eigen::VectorXd Mlp::grad_input(const Eigen::VectorXd& x, const Eigen::VectorXd& cotangent) const {
    return grad_input_batch(x, cotangent).col(0);
}

Eigen::MatrixXd Mlp::grad_input_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cotangent) const {
    if (cotangent.rows() != output_dim() || cotangent.cols() != x.cols())
        throw ShapeError("cotangent shape does not match network output");
    Cache cache;
    run(x, &cache);
    return backprop(cache, cotangent, nullptr);
}

Eigen::RowVectorXd Mlp::value_and_grad_batch(const Eigen::MatrixXd& x, Eigen::MatrixXd& grad) const {
    if (output_dim() != 1) throw ShapeError("value_and_grad_batch needs a scalar-output network");
    Cache cache;
    Eigen::MatrixXd out = run(x, &cache);
    grad = backprop(cache, Eigen::MatrixXd::Ones(1, x.cols()), nullptr);
    return out.row(0);
}

double Mlp::mse_and_gradients(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                              Gradients& grads) const {
    if (inputs.cols() == 0) throw ShapeError("empty training batch");
    if (targets.rows() != output_dim() || targets.cols() != inputs.cols())
        throw ShapeError("target shape does not match network output");
    Cache cache;
    const Eigen::MatrixXd out = run(inputs, &cache);
    const Eigen::MatrixXd diff = out - targets;
    const double count = static_cast<double>(diff.size());
    const double loss = diff.squaredNorm() / count;
    backprop(cache, (2.0 / count) * diff, &grads);
    return loss;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < num_layers(); ++l)
        n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
}

Eigen::VectorXd Mlp::flat_parameters() const {
    Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (int l = 0; l < num_layers(); ++l) {
        const auto& w = weights_[l];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) flat[k++] = w(r, c);
        for (Eigen::Index r = 0; r < biases_[l].size(); ++r) flat[k++] = biases_[l][r];
    }
    return flat;
}

void Mlp::set_flat_parameters(const Eigen::VectorXd& flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count())
        throw ShapeError("flat parameter vector has the wrong length");
    Eigen::Index k = 0;
    for (int l = 0; l < num_layers(); ++l) {
        auto& w = weights_[l];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat[k++];
        for (Eigen::Index r = 0; r < biases_[l].size(); ++r) biases_[l][r] = flat[k++];
    }
}

bool Mlp::all_finite() const {
    for (int l = 0; l < num_layers(); ++l)
        if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
    return true;
}

void Mlp::save(std::ostream& out) const {
    out << kMagic << ' ' << kFormatVersion << '\n';
    out << "hidden " << to_string(hidden_) << '\n';
    out << "output " << to_string(output_) << '\n';
    out << "layers " << layer_sizes_.size();
    for (int s : layer_sizes_) out << ' ' << s;
    out << '\n';
    const Eigen::VectorXd flat = flat_parameters();
    out << "params " << flat.size() << '\n';
    out << std::hexfloat;
    for (Eigen::Index k = 0; k < flat.size(); ++k) out << flat[k] << ((k % 8 == 7) ? '\n' : ' ');
    out << std::defaultfloat << "\nend\n";
}

Mlp Mlp::load(std::istream& in) {
    std::string tag;
    int version = 0;
    if (!(in >> tag >> version) || tag != kMagic) throw FormatError("not an Mlp checkpoint");
    if (version != kFormatVersion) throw FormatError("unsupported Mlp checkpoint version");
    std::string key, hidden, output;
    in >> key >> hidden;
    if (key != "hidden") throw FormatError("Mlp checkpoint: expected 'hidden'");
    in >> key >> output;
    if (key != "output") throw FormatError("Mlp checkpoint: expected 'output'");
    std::size_t n_layers = 0;
    in >> key >> n_layers;
    if (key != "layers" || n_layers < 2) throw FormatError("Mlp checkpoint: bad layer header");
    std::vector<int> sizes(n_layers);
    for (auto& s : sizes) in >> s;
    Mlp net(sizes, activation_from_string(hidden), activation_from_string(output));
    Eigen::Index count = 0;
    in >> key >> count;
    if (key != "params" || static_cast<std::size_t>(count) != net.parameter_count())
        throw FormatError("Mlp checkpoint: parameter count mismatch");
    Eigen::VectorXd flat(count);
    for (Eigen::Index k = 0; k < count; ++k) {
        std::string token;
        if (!(in >> token)) throw FormatError("Mlp checkpoint: truncated parameters");
        flat[k] = std::strtod(token.c_str(), nullptr);
    }
    in >> key;
    if (key != "end") throw FormatError("Mlp checkpoint: missing end marker");
    net.set_flat_parameters(flat);
    return net;
}

OptimizerState::OptimizerState(const Mlp& net, AdamConfig config) : config_(config) {
    for (int l = 0; l < net.num_layers(); ++l) {
        m_w_.push_back(Eigen::MatrixXd::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
        v_w_.push_back(m_w_.back());
        m_b_.push_back(Eigen::VectorXd::Zero(net.biases()[l].size()));
        v_b_.push_back(m_b_.back());
    }
}

void OptimizerState::apply(Mlp& net, const Mlp::Gradients& grads) {
    if (static_cast<int>(m_w_.size()) != net.num_layers())
        throw ShapeError("optimizer state was built for a different network");
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double lr = config_.learning_rate, eps = config_.epsilon;
    auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = b1 * m + (1.0 - b1) * g;
        v.array() = b2 * v.array() + (1.0 - b2) * g.array().square();
        param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    for (int l = 0; l < net.num_layers(); ++l) {
        update(net.weights()[l], m_w_[l], v_w_[l], grads.weights[l]);
        update(net.biases()[l], m_b_[l], v_b_[l], grads.biases[l]);
    }
}

double train_step(Mlp& net, OptimizerState& opt, const Eigen::MatrixXd& inputs,
                  const Eigen::MatrixXd& targets) {
    Mlp::Gradients grads;
    const double loss = net.mse_and_gradients(inputs, targets, grads);
    if (!std::isfinite(loss)) throw TrainingDivergence("non-finite training loss");
    opt.apply(net, grads);
    if (!net.all_finite()) throw TrainingDivergence("non-finite parameters after update");
    return loss;
}

}  // namespace trebi::nn

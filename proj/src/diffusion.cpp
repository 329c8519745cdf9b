#include "trebi/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "trebi/errors.hpp"
#include "trebi/util.hpp"

namespace trebi::diffusion {

// ------------------------------------------------------------- NoiseSchedule

NoiseSchedule::NoiseSchedule(std::vector<double> betas, ReverseVariance variance)
    : betas_(std::move(betas)), variance_(variance) {
    if (betas_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
    for (double b : betas_)
        if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("betas must lie in (0,1)");
    const int n = steps();
    alpha_bar_.assign(static_cast<std::size_t>(n) + 1, 1.0);
    for (int i = 1; i <= n; ++i) alpha_bar_[i] = alpha_bar_[i - 1] * (1.0 - betas_[i - 1]);
    posterior_var_.assign(static_cast<std::size_t>(n) + 1, 0.0);
    for (int i = 1; i <= n; ++i)
        posterior_var_[i] = betas_[i - 1] * (1.0 - alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]);
}

NoiseSchedule NoiseSchedule::cosine(int steps, ReverseVariance variance, double offset, double max_beta) {
    if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
    auto f = [&](double i) {
        const double c = std::cos((i / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
        return c * c;
    };
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 1; i <= steps; ++i) betas[i - 1] = std::min(1.0 - f(i) / f(i - 1), max_beta);
    return NoiseSchedule(std::move(betas), variance);
}

void NoiseSchedule::check_step(int i) const {
    if (i < 1 || i > steps()) throw std::out_of_range("diffusion step " + std::to_string(i) + " out of range");
}

double NoiseSchedule::beta(int i) const {
    check_step(i);
    return betas_[i - 1];
}

double NoiseSchedule::alpha_bar(int i) const {
    if (i == 0) return 1.0;
    check_step(i);
    return alpha_bar_[i];
}

double NoiseSchedule::signal_coef(int i) const { return std::sqrt(alpha_bar(i)); }
double NoiseSchedule::noise_coef(int i) const { return std::sqrt(1.0 - alpha_bar(i)); }

double NoiseSchedule::posterior_variance(int i) const {
    check_step(i);
    return posterior_var_[i];
}

double NoiseSchedule::reverse_variance(int i) const {
    check_step(i);
    if (variance_ == ReverseVariance::kBeta) return betas_[i - 1];
    if (i == 1 && steps() >= 2) return posterior_var_[2];
    return posterior_var_[i];
}

double NoiseSchedule::posterior_coef_x0(int i) const {
    check_step(i);
    return betas_[i - 1] * std::sqrt(alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]);
}

double NoiseSchedule::posterior_coef_xt(int i) const {
    check_step(i);
    return (1.0 - alpha_bar_[i - 1]) * std::sqrt(1.0 - betas_[i - 1]) / (1.0 - alpha_bar_[i]);
}

void NoiseSchedule::save(std::ostream& out) const {
    out << "schedule " << betas_.size() << (variance_ == ReverseVariance::kBeta ? " beta" : " posterior")
        << std::hexfloat;
    for (double b : betas_) out << ' ' << b;
    out << std::defaultfloat << '\n';
}

NoiseSchedule NoiseSchedule::load(std::istream& in) {
    std::string key;
    std::string kind;
    std::size_t n = 0;
    if (!(in >> key >> n >> kind) || key != "schedule") throw FormatError("expected schedule block");
    if (kind != "beta" && kind != "posterior") throw FormatError("unknown reverse variance '" + kind + "'");
    std::vector<double> betas(n);
    for (auto& b : betas) {
        std::string tok;
        in >> tok;
        b = std::strtod(tok.c_str(), nullptr);
    }
    if (!in) throw FormatError("truncated schedule block");
    return NoiseSchedule(std::move(betas), kind == "beta" ? ReverseVariance::kBeta : ReverseVariance::kPosterior);
}

// ------------------------------------------------------------------ helpers

Eigen::VectorXd step_embedding(int i, int dims) {
    if (dims < 2 || dims % 2 != 0) throw std::invalid_argument("step embedding size must be even and >= 2");
    const int half = dims / 2;
    Eigen::VectorXd e(dims);
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(1000.0) * k / half);
        e[k] = std::sin(i * freq);
        e[half + k] = std::cos(i * freq);
    }
    return e;
}

NoisedSample add_noise(const NoiseSchedule& schedule, const Eigen::VectorXd& tau0, int i, Rng& rng) {
    if (i < 1 || i > schedule.steps())
        throw std::out_of_range("diffusion step " + std::to_string(i) + " out of range");
    NoisedSample out;
    out.noise = rng.normal_vector(tau0.size());
    out.tau_i = schedule.signal_coef(i) * tau0 + schedule.noise_coef(i) * out.noise;
    return out;
}

Eigen::VectorXd overwrite_first_state(const Eigen::VectorXd& tau, const Eigen::VectorXd& state_features,
                                      const traj::Layout& layout) {
    if (tau.size() != layout.size()) throw ShapeError("trajectory has the wrong length");
    if (state_features.size() != layout.state_features) throw ShapeError("state has the wrong dimension");
    Eigen::VectorXd out = tau;
    out.segment(layout.state_offset(0), layout.state_features) = state_features;
    return out;
}

Eigen::MatrixXd window_matrix(const std::vector<traj::Window>& windows, const traj::TrajectoryNormalizer& normalizer) {
    if (windows.empty()) throw std::invalid_argument("no windows");
    const traj::Layout layout = windows.front().traj.layout();
    Eigen::MatrixXd m(layout.size(), static_cast<Eigen::Index>(windows.size()));
    for (std::size_t k = 0; k < windows.size(); ++k)
        m.col(static_cast<Eigen::Index>(k)) = normalizer.normalize_flat(windows[k].traj.flatten(), layout);
    return m;
}

// ----------------------------------------------------------- DiffusionModel

DiffusionModel::DiffusionModel(const cmdp::CmdpSpec& spec, const traj::Layout& layout, NoiseSchedule schedule,
                               traj::TrajectoryNormalizer normalizer, const DenoiserConfig& config, Rng& rng)
    : spec_(spec),
      spec_hash_(spec.hash()),
      layout_(layout),
      encoder_(spec),
      schedule_(std::move(schedule)),
      normalizer_(std::move(normalizer)),
      config_(config) {
    if (encoder_.state_features() != layout.state_features || encoder_.action_features() != layout.action_features)
        throw ShapeError("layout does not match the environment encoding");
    std::vector<int> sizes{layout.size() + config.embed_dims};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(layout.size());
    denoiser_ = nn::Mlp::random(sizes, config.activation, rng);
    // zero output layer: the untrained model predicts zero noise
    denoiser_.weights().back().setZero();
}

Eigen::MatrixXd DiffusionModel::denoiser_input(const Eigen::MatrixXd& tau_i, int i) const {
    if (tau_i.rows() != dim()) throw ShapeError("trajectory batch has the wrong row count");
    Eigen::MatrixXd x(dim() + config_.embed_dims, tau_i.cols());
    x.topRows(dim()) = tau_i;
    x.bottomRows(config_.embed_dims) = step_embedding(i, config_.embed_dims).replicate(1, tau_i.cols());
    return x;
}

Eigen::MatrixXd DiffusionModel::predict_noise(const Eigen::MatrixXd& tau_i, int i) const {
    return denoiser_.forward_batch(denoiser_input(tau_i, i));
}

Eigen::MatrixXd DiffusionModel::posterior_mean(const Eigen::MatrixXd& tau_i, int i) const {
    const Eigen::MatrixXd eps = predict_noise(tau_i, i);
    Eigen::MatrixXd x0 = (tau_i - schedule_.noise_coef(i) * eps) / schedule_.signal_coef(i);
    if (config_.clip_denoised) x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
    return schedule_.posterior_coef_x0(i) * x0 + schedule_.posterior_coef_xt(i) * tau_i;
}

Eigen::MatrixXd DiffusionModel::reverse_step(const Eigen::MatrixXd& tau_i, int i, const Eigen::MatrixXd* guidance,
                                             Rng& rng) const {
    Eigen::MatrixXd mean = posterior_mean(tau_i, i);
    const double var = schedule_.reverse_variance(i);
    if (guidance) {
        if (guidance->rows() != mean.rows() || guidance->cols() != mean.cols())
            throw ShapeError("guidance has the wrong shape");
        if (!guidance->allFinite()) throw GuidanceError("non-finite guidance gradient");
        mean += var * (*guidance);
    }
    if (i > 1) mean += std::sqrt(var) * rng.normal_matrix(mean.rows(), mean.cols());
    return mean;
}

Eigen::VectorXd DiffusionModel::reverse_step(const Eigen::VectorXd& tau_i, int i, const Eigen::VectorXd* guidance,
                                             Rng& rng) const {
    const Eigen::MatrixXd g = guidance ? Eigen::MatrixXd(*guidance) : Eigen::MatrixXd();
    return reverse_step(Eigen::MatrixXd(tau_i), i, guidance ? &g : nullptr, rng).col(0);
}

Eigen::VectorXd DiffusionModel::normalized_state_features(const Eigen::VectorXd& raw_state) const {
    return normalizer_.states.normalize(encoder_.encode_state(raw_state));
}

Eigen::VectorXd DiffusionModel::condition_first_state(const Eigen::VectorXd& tau, const Eigen::VectorXd& raw_state) const {
    return overwrite_first_state(tau, normalized_state_features(raw_state), layout_);
}

Eigen::MatrixXd DiffusionModel::sample(int count, const std::optional<Eigen::MatrixXd>& first_state,
                                       const GuidanceFn* guidance, Rng& rng, const Eigen::MatrixXd* init) const {
    if (count < 1) throw std::invalid_argument("sample count must be >= 1");
    Eigen::MatrixXd tau = init ? *init : rng.normal_matrix(dim(), count);
    if (tau.rows() != dim() || tau.cols() != count) throw ShapeError("initial noise has the wrong shape");
    if (first_state && (first_state->rows() != layout_.state_features ||
                        (first_state->cols() != 1 && first_state->cols() != count)))
        throw ShapeError("first state has the wrong dimension");
    auto impose = [&](Eigen::MatrixXd& m) {
        if (!first_state) return;
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m.block(layout_.state_offset(0), c, layout_.state_features, 1) =
                first_state->col(first_state->cols() == 1 ? 0 : c);
    };
    impose(tau);
    for (int i = schedule_.steps(); i >= 1; --i) {
        if (guidance && *guidance) {
            const Eigen::MatrixXd g = (*guidance)(tau, i);
            tau = reverse_step(tau, i, &g, rng);
        } else {
            tau = reverse_step(tau, i, nullptr, rng);
        }
        impose(tau);
    }
    return tau;
}

void DiffusionModel::save(std::ostream& out) const {
    out << "trebi-diffusion 1\n";
    cmdp::save_spec(out, spec_);
    out << "spec_hash " << hex64(spec_hash_) << '\n';
    out << "layout " << layout_.horizon << ' ' << layout_.state_features << ' ' << layout_.action_features << '\n';
    out << "embed " << config_.embed_dims << " clip " << (config_.clip_denoised ? 1 : 0) << '\n';
    schedule_.save(out);
    normalizer_.save(out);
    denoiser_.save(out);
}

DiffusionModel DiffusionModel::load(std::istream& in) {
    std::string key, hash;
    int version = 0;
    if (!(in >> key >> version) || key != "trebi-diffusion") throw FormatError("not a diffusion checkpoint");
    if (version != 1) throw FormatError("unsupported diffusion checkpoint version");
    DiffusionModel m;
    m.spec_ = cmdp::load_spec(in);
    in >> key >> hash;
    if (key != "spec_hash") throw FormatError("diffusion checkpoint: missing spec_hash");
    m.spec_hash_ = std::stoull(hash, nullptr, 16);
    if (m.spec_hash_ != m.spec_.hash()) throw FormatError("diffusion checkpoint: spec hash does not match its spec");
    in >> key >> m.layout_.horizon >> m.layout_.state_features >> m.layout_.action_features;
    if (key != "layout") throw FormatError("diffusion checkpoint: missing layout");
    int clip = 1;
    in >> key >> m.config_.embed_dims;
    if (key != "embed") throw FormatError("diffusion checkpoint: missing embed");
    in >> key >> clip;
    m.config_.clip_denoised = clip != 0;
    m.encoder_ = traj::Encoder(m.spec_);
    m.schedule_ = NoiseSchedule::load(in);
    m.normalizer_ = traj::TrajectoryNormalizer::load(in);
    m.denoiser_ = nn::Mlp::load(in);
    m.config_.activation = m.denoiser_.hidden_activation();
    m.config_.hidden.assign(m.denoiser_.layer_sizes().begin() + 1, m.denoiser_.layer_sizes().end() - 1);
    if (m.denoiser_.input_dim() != m.dim() + m.config_.embed_dims || m.denoiser_.output_dim() != m.dim())
        throw FormatError("diffusion checkpoint: denoiser shape does not match layout");
    return m;
}

// ------------------------------------------------------------------ training

namespace {

// Builds one minibatch of (denoiser input, noise target) from the given columns.
// With clean_first_state the first-state block is left un-noised, as it is
// during conditioned sampling; its target is the noise that maps that input
// back onto itself.
void noise_batch(const DiffusionModel& model, const Eigen::MatrixXd& windows, const std::vector<Eigen::Index>& cols,
                 bool clean_first_state, Rng& rng, Eigen::MatrixXd& inputs, Eigen::MatrixXd& targets) {
    const int d = model.dim();
    const int e = model.config().embed_dims;
    const auto b = static_cast<Eigen::Index>(cols.size());
    inputs.resize(d + e, b);
    targets.resize(d, b);
    for (Eigen::Index k = 0; k < b; ++k) {
        const int i = rng.uniform_int(1, model.schedule().steps());
        const NoisedSample ns = add_noise(model.schedule(), windows.col(cols[static_cast<std::size_t>(k)]), i, rng);
        inputs.col(k).head(d) = ns.tau_i;
        inputs.col(k).tail(e) = step_embedding(i, e);
        targets.col(k) = ns.noise;
        if (clean_first_state) {
            const int off = model.layout().state_offset(0), sf = model.layout().state_features;
            const auto s0 = windows.col(cols[static_cast<std::size_t>(k)]).segment(off, sf);
            const NoiseSchedule& sch = model.schedule();
            inputs.col(k).segment(off, sf) = s0;
            targets.col(k).segment(off, sf) = s0 * ((1.0 - sch.signal_coef(i)) / sch.noise_coef(i));
        }
    }
}

}  // namespace

std::vector<double> train(DiffusionModel& model, const Eigen::MatrixXd& windows, const TrainConfig& config, Rng& rng) {
    if (windows.cols() == 0) throw std::invalid_argument("diffusion training needs at least one window");
    if (windows.rows() != model.dim()) throw ShapeError("window matrix does not match the model layout");
    if (config.epochs < 1 || config.batch_size < 1) throw std::invalid_argument("bad training config");
    nn::OptimizerState opt(model.denoiser(), {.learning_rate = config.learning_rate});
    std::vector<Eigen::Index> order(static_cast<std::size_t>(windows.cols()));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> curve;
    Eigen::MatrixXd inputs, targets;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double frac = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 1.0;
        opt.set_learning_rate(config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * frac));
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<Eigen::Index> cols(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            noise_batch(model, windows, cols, config.clean_first_state, rng, inputs, targets);
            double loss = 0.0;
            try {
                loss = nn::train_step(model.denoiser(), opt, inputs, targets);
            } catch (const TrainingDivergence& e) {
                std::ostringstream msg;
                msg << "diffusion training diverged at epoch " << epoch << ", batch " << batches << ": " << e.what();
                throw TrainingDivergence(msg.str());
            }
            total += loss;
            ++batches;
        }
        curve.push_back(total / batches);
    }
    return curve;
}

double evaluate_loss(const DiffusionModel& model, const Eigen::MatrixXd& windows, Rng& rng, bool clean_first_state) {
    std::vector<Eigen::Index> cols(static_cast<std::size_t>(windows.cols()));
    std::iota(cols.begin(), cols.end(), 0);
    Eigen::MatrixXd inputs, targets;
    noise_batch(model, windows, cols, clean_first_state, rng, inputs, targets);
    return (model.denoiser().forward_batch(inputs) - targets).squaredNorm() / static_cast<double>(targets.size());
}

}  // namespace trebi::diffusion

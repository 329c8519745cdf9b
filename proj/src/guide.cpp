#include "trebi/guide.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "trebi/errors.hpp"
#include "trebi/util.hpp"

namespace trebi::guide {

void GuideConfig::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("guide alpha must be a positive finite number");
    if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("guide penalty n must be a positive finite number");
}

GuidePair::GuidePair(const diffusion::DiffusionModel& model, const GuideNetConfig& config, Rng& rng)
    : spec_hash_(model.spec_hash()),
      layout_(model.layout()),
      embed_dims_(model.config().embed_dims),
      diffusion_steps_(model.schedule().steps()) {
    std::vector<int> sizes{layout_.size() + embed_dims_};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(1);
    reward_head_ = nn::Mlp::random(sizes, config.activation, rng);
    cost_head_ = nn::Mlp::random(sizes, config.activation, rng, nn::Activation::kSoftplus);
    reward_head_.weights().back().setZero();
    cost_head_.weights().back().setZero();
}

void GuidePair::set_label_scales(double reward_offset, double reward_scale, double cost_scale) {
    if (!std::isfinite(reward_offset) || !(reward_scale > 0.0) || !(cost_scale > 0.0))
        throw std::invalid_argument("guide label scales must be finite and positive");
    reward_offset_ = reward_offset;
    reward_scale_ = reward_scale;
    cost_scale_ = cost_scale;
}

Eigen::MatrixXd GuidePair::head_input(const Eigen::MatrixXd& tau, int i) const {
    if (tau.rows() != layout_.size()) throw ShapeError("trajectory batch has the wrong row count");
    if (i < 0 || i > diffusion_steps_) throw std::out_of_range("guide step " + std::to_string(i) + " out of range");
    Eigen::MatrixXd x(layout_.size() + embed_dims_, tau.cols());
    x.topRows(layout_.size()) = tau;
    x.bottomRows(embed_dims_) = diffusion::step_embedding(i, embed_dims_).replicate(1, tau.cols());
    return x;
}

GuidePair::Values GuidePair::evaluate(const Eigen::MatrixXd& tau, int i) const {
    const Eigen::MatrixXd x = head_input(tau, i);
    Values v;
    v.reward = (reward_offset_ + reward_scale_ * reward_head_.forward_batch(x).array()).matrix();
    v.cost = cost_scale_ * cost_head_.forward_batch(x);
    return v;
}

GuidePair::ValuesAndGrads GuidePair::evaluate_with_grad(const Eigen::MatrixXd& tau, int i) const {
    const Eigen::MatrixXd x = head_input(tau, i);
    ValuesAndGrads v;
    Eigen::MatrixXd gr, gc;
    v.reward = (reward_offset_ + reward_scale_ * reward_head_.value_and_grad_batch(x, gr).array()).matrix();
    v.cost = cost_scale_ * cost_head_.value_and_grad_batch(x, gc);
    v.reward_grad = reward_scale_ * gr.topRows(layout_.size());
    v.cost_grad = cost_scale_ * gc.topRows(layout_.size());
    return v;
}

void GuidePair::check_compatible(const diffusion::DiffusionModel& model) const {
    if (spec_hash_ != model.spec_hash())
        throw FormatError("guide checkpoint was trained for a different environment (spec hash " + hex64(spec_hash_) +
                          ", model has " + hex64(model.spec_hash()) + ")");
    if (!(layout_ == model.layout())) throw FormatError("guide checkpoint layout does not match the diffusion model");
    if (embed_dims_ != model.config().embed_dims || diffusion_steps_ != model.schedule().steps())
        throw FormatError("guide checkpoint step embedding does not match the diffusion model");
}

void GuidePair::save(std::ostream& out) const {
    out << "trebi-guides 1\n";
    out << "spec_hash " << hex64(spec_hash_) << '\n';
    out << "layout " << layout_.horizon << ' ' << layout_.state_features << ' ' << layout_.action_features << '\n';
    out << "embed " << embed_dims_ << " steps " << diffusion_steps_ << '\n';
    out << "scales " << std::hexfloat << reward_offset_ << ' ' << reward_scale_ << ' ' << cost_scale_
        << std::defaultfloat << '\n';
    reward_head_.save(out);
    cost_head_.save(out);
}

GuidePair GuidePair::load(std::istream& in) {
    std::string key, tok;
    int version = 0;
    if (!(in >> key >> version) || key != "trebi-guides") throw FormatError("not a guide checkpoint");
    if (version != 1) throw FormatError("unsupported guide checkpoint version");
    GuidePair g;
    in >> key >> tok;
    if (key != "spec_hash") throw FormatError("guide checkpoint: missing spec_hash");
    g.spec_hash_ = std::stoull(tok, nullptr, 16);
    in >> key >> g.layout_.horizon >> g.layout_.state_features >> g.layout_.action_features;
    if (key != "layout") throw FormatError("guide checkpoint: missing layout");
    in >> key >> g.embed_dims_;
    if (key != "embed") throw FormatError("guide checkpoint: missing embed");
    in >> key >> g.diffusion_steps_;
    if (key != "steps") throw FormatError("guide checkpoint: missing steps");
    in >> key;
    if (key != "scales") throw FormatError("guide checkpoint: missing scales");
    double vals[3];
    for (double& v : vals) {
        in >> tok;
        v = std::strtod(tok.c_str(), nullptr);
    }
    if (!in) throw FormatError("truncated guide checkpoint");
    g.reward_offset_ = vals[0];
    g.reward_scale_ = vals[1];
    g.cost_scale_ = vals[2];
    g.reward_head_ = nn::Mlp::load(in);
    g.cost_head_ = nn::Mlp::load(in);
    const int in_dim = g.layout_.size() + g.embed_dims_;
    if (g.reward_head_.input_dim() != in_dim || g.cost_head_.input_dim() != in_dim ||
        g.reward_head_.output_dim() != 1 || g.cost_head_.output_dim() != 1)
        throw FormatError("guide checkpoint: head shapes do not match layout");
    return g;
}

GuideLossCurves train_guides(GuidePair& pair, const std::vector<traj::Window>& windows,
                             const traj::TrajectoryNormalizer& normalizer, const diffusion::NoiseSchedule& schedule,
                             const GuideTrainConfig& config, Rng& rng) {
    if (windows.empty()) throw std::invalid_argument("guide training needs at least one window");
    if (config.epochs < 1 || config.batch_size < 1) throw std::invalid_argument("bad guide training config");
    if (schedule.steps() != pair.diffusion_steps()) throw ShapeError("schedule does not match the guide step range");
    const Eigen::MatrixXd clean = diffusion::window_matrix(windows, normalizer);
    if (clean.rows() != pair.layout().size()) throw ShapeError("windows do not match the guide layout");

    const auto m = static_cast<Eigen::Index>(windows.size());
    Eigen::RowVectorXd rlab(m), clab(m);
    for (Eigen::Index k = 0; k < m; ++k) {
        rlab[k] = windows[static_cast<std::size_t>(k)].reward_to_go;
        clab[k] = windows[static_cast<std::size_t>(k)].cost_to_go;
    }
    const double r_mean = rlab.mean();
    const double r_std = std::sqrt((rlab.array() - r_mean).square().mean());
    const double c_max = clab.maxCoeff();
    pair.set_label_scales(r_mean, r_std > 1e-12 ? r_std : 1.0, c_max > 1e-12 ? c_max : 1.0);
    const Eigen::RowVectorXd r_target = (rlab.array() - r_mean) / pair.reward_scale();
    const Eigen::RowVectorXd c_target = clab / pair.cost_scale();

    nn::OptimizerState opt_r(pair.reward_head(), {.learning_rate = config.learning_rate});
    nn::OptimizerState opt_c(pair.cost_head(), {.learning_rate = config.learning_rate});
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    const int d = pair.layout().size();
    const int e = pair.embed_dims();
    const int state0 = pair.layout().state_offset(0), sf = pair.layout().state_features;
    GuideLossCurves curves;
    Eigen::MatrixXd inputs;
    Eigen::RowVectorXd rt, ct;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double frac = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 1.0;
        const double lr = config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * frac);
        opt_r.set_learning_rate(lr);
        opt_c.set_learning_rate(lr);
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total_r = 0.0, total_c = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const auto b = static_cast<Eigen::Index>(end - start);
            inputs.resize(d + e, b);
            rt.resize(b);
            ct.resize(b);
            for (Eigen::Index k = 0; k < b; ++k) {
                const Eigen::Index col = order[start + static_cast<std::size_t>(k)];
                const int i = rng.uniform() < config.clean_fraction ? 0 : rng.uniform_int(1, schedule.steps());
                if (i == 0)
                    inputs.col(k).head(d) = clean.col(col);
                else
                    inputs.col(k).head(d) = diffusion::add_noise(schedule, clean.col(col), i, rng).tau_i;
                if (config.clean_first_state)
                    inputs.col(k).segment(state0, sf) = clean.col(col).segment(state0, sf);
                inputs.col(k).tail(e) = diffusion::step_embedding(i, e);
                rt[k] = r_target[col];
                ct[k] = c_target[col];
            }
            try {
                total_r += nn::train_step(pair.reward_head(), opt_r, inputs, rt);
                total_c += nn::train_step(pair.cost_head(), opt_c, inputs, ct);
            } catch (const TrainingDivergence& ex) {
                std::ostringstream msg;
                msg << "guide training diverged at epoch " << epoch << ", batch " << batches << ": " << ex.what();
                throw TrainingDivergence(msg.str());
            }
            ++batches;
        }
        // losses are reported in label units
        curves.reward.push_back(total_r / batches * pair.reward_scale() * pair.reward_scale());
        curves.cost.push_back(total_c / batches * pair.cost_scale() * pair.cost_scale());
    }
    return curves;
}

double smoothed_objective(double reward, double cost, const GuideConfig& config, double budget) {
    if (cost > budget) return reward - config.n * (cost - budget);
    return reward;
}

Guidance guidance_gradient(const GuidePair& pair, const Eigen::MatrixXd& tau_i, int i, const GuideConfig& config,
                           double budget) {
    config.validate();
    if (std::isnan(budget)) throw std::invalid_argument("budget is NaN");
    GuidePair::ValuesAndGrads v = pair.evaluate_with_grad(tau_i, i);
    Guidance out;
    out.gradient = std::move(v.reward_grad);
    out.unsafe.assign(static_cast<std::size_t>(tau_i.cols()), false);
    for (Eigen::Index k = 0; k < tau_i.cols(); ++k) {
        if (v.cost[k] > budget) {
            out.unsafe[static_cast<std::size_t>(k)] = true;
            out.gradient.col(k) -= config.n * v.cost_grad.col(k);
        }
    }
    out.gradient *= config.alpha;
    out.reward = std::move(v.reward);
    out.cost = std::move(v.cost);
    if (!out.gradient.allFinite()) throw GuidanceError("non-finite guidance gradient at step " + std::to_string(i));
    return out;
}

Eigen::VectorXd guidance_gradient(const GuidePair& pair, const Eigen::VectorXd& tau_i, int i,
                                  const GuideConfig& config, double budget) {
    return guidance_gradient(pair, Eigen::MatrixXd(tau_i), i, config, budget).gradient.col(0);
}

}  // namespace trebi::guide

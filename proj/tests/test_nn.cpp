#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"

#include "trebi/errors.hpp"
#include "trebi/nn.hpp"

using namespace trebi;
using nn::Activation;
using nn::Mlp;

namespace {

// Central differences of c . f(x).
Eigen::VectorXd fd_grad(const Mlp& net, const Eigen::VectorXd& x, const Eigen::VectorXd& c, double h = 1e-4) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        Eigen::VectorXd xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        g[k] = (c.dot(net.forward(xp)) - c.dot(net.forward(xm))) / (2 * h);
    }
    return g;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("zero network maps anything to zero") {
    Mlp net({3, 5, 2}, Activation::kTanh);
    CHECK(net.forward(Eigen::Vector3d(1.0, -2.0, 7.0)).isZero(0.0));
}

TEST_CASE("identity linear layer passes input through") {
    Mlp net({2, 2}, Activation::kTanh);
    net.weights()[0].setIdentity();
    const Eigen::VectorXd y = net.forward(Eigen::Vector2d(2.0, 3.0));
    CHECK(y[0] == 2.0);
    CHECK(y[1] == 3.0);
}

TEST_CASE("2-4-1 tanh net matches a hand-rolled forward pass") {
    Rng rng(7);
    Mlp net = Mlp::random({2, 4, 1}, Activation::kTanh, rng);
    for (auto& b : net.biases()) b.setRandom();
    const double x0 = 0.5, x1 = -0.5;
    double out = net.biases()[1][0];
    for (int h = 0; h < 4; ++h) {
        double pre = net.biases()[0][h];
        pre += net.weights()[0](h, 0) * x0 + net.weights()[0](h, 1) * x1;
        out += net.weights()[1](0, h) * std::tanh(pre);
    }
    CHECK(net.forward(Eigen::Vector2d(x0, x1))[0] == doctest::Approx(out).epsilon(1e-14));
}

TEST_CASE("forward rejects the wrong input size") {
    Mlp net({3, 2}, Activation::kTanh);
    CHECK_THROWS_AS(net.forward(Eigen::Vector2d(1, 2)), ShapeError);
    CHECK_THROWS_AS(net.grad_input(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 1, 1)), ShapeError);
}

TEST_CASE("linear net input gradient is the selected weight row") {
    Rng rng(1);
    Mlp net = Mlp::random({4, 3}, Activation::kTanh, rng);
    const Eigen::VectorXd x = rng.normal_vector(4);
    for (int k = 0; k < 3; ++k) {
        const Eigen::VectorXd g = net.grad_input(x, Eigen::VectorXd::Unit(3, k));
        CHECK((g - net.weights()[0].row(k).transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("zero output weights give a zero input gradient") {
    Rng rng(2);
    Mlp net = Mlp::random({3, 8, 1}, Activation::kSilu, rng);
    net.weights().back().setZero();
    CHECK(net.grad_input(rng.normal_vector(3), Eigen::VectorXd::Ones(1)).isZero(0.0));
}

TEST_CASE("input gradients match central differences on random nets") {
    Rng rng(3);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Activation act = trial % 2 ? Activation::kTanh : Activation::kSilu;
        const Activation out = trial % 3 == 0 ? Activation::kSoftplus : Activation::kIdentity;
        Mlp net = Mlp::random({5, 7, 6, 2}, act, rng, out);
        for (auto& b : net.biases()) b = 0.3 * rng.normal_vector(b.size());
        const Eigen::VectorXd x = rng.normal_vector(5);
        const Eigen::VectorXd c = rng.normal_vector(2);
        const Eigen::VectorXd g = net.grad_input(x, c);
        const Eigen::VectorXd fd = fd_grad(net, x, c);
        for (Eigen::Index k = 0; k < g.size(); ++k) CHECK(std::abs(g[k] - fd[k]) <= 1e-4 * (1.0 + std::abs(g[k])));
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("batched value and gradient agree with the single-sample path") {
    Rng rng(4);
    Mlp net = Mlp::random({3, 6, 1}, Activation::kTanh, rng, Activation::kSoftplus);
    const Eigen::MatrixXd x = rng.normal_matrix(3, 5);
    Eigen::MatrixXd grad;
    const Eigen::RowVectorXd v = net.value_and_grad_batch(x, grad);
    for (int k = 0; k < 5; ++k) {
        CHECK(v[k] == doctest::Approx(net.forward(x.col(k))[0]).epsilon(1e-14));
        CHECK((grad.col(k) - net.grad_input(x.col(k), Eigen::VectorXd::Ones(1))).cwiseAbs().maxCoeff() < 1e-14);
    }
}

TEST_CASE("softplus output is never negative") {
    Rng rng(5);
    Mlp net = Mlp::random({2, 4, 1}, Activation::kTanh, rng, Activation::kSoftplus);
    net.biases().back()[0] = -50.0;
    CHECK((net.forward_batch(10.0 * rng.normal_matrix(2, 100)).array() >= 0.0).all());
}

TEST_CASE("constant target: loss strictly decreases over 100 steps") {
    Mlp net({1, 1}, Activation::kTanh);
    nn::OptimizerState opt(net, {.learning_rate = 1e-2});
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 4);
    const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(1, 4, 3.0);
    double prev = nn::train_step(net, opt, x, y);
    for (int k = 1; k < 100; ++k) {
        const double loss = nn::train_step(net, opt, x, y);
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(opt.step() == 100);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    Rng rng(6);
    Mlp net = Mlp::random({2, 5, 1}, Activation::kTanh, rng);
    const Eigen::VectorXd before = net.flat_parameters();
    nn::OptimizerState opt(net, {.learning_rate = 0.0});
    nn::train_step(net, opt, rng.normal_matrix(2, 8), rng.normal_matrix(1, 8));
    CHECK((net.flat_parameters() - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("non-finite loss aborts training") {
    Mlp net({1, 1}, Activation::kTanh);
    nn::OptimizerState opt(net);
    Eigen::MatrixXd y(1, 1);
    y(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(nn::train_step(net, opt, Eigen::MatrixXd::Zero(1, 1), y), TrainingDivergence);
}

TEST_CASE("sin regression reaches MSE below 1e-2") {
    Rng rng(11);
    Mlp net = Mlp::random({1, 32, 32, 1}, Activation::kTanh, rng);
    nn::OptimizerState opt(net, {.learning_rate = 3e-3});
    Eigen::MatrixXd x(1, 256), y(1, 256);
    for (int k = 0; k < 256; ++k) {
        x(0, k) = -3.0 + 6.0 * k / 255.0;
        y(0, k) = std::sin(x(0, k));
    }
    double loss = 1.0;
    for (int step = 0; step < 5000 && loss >= 1e-2; ++step) loss = nn::train_step(net, opt, x, y);
    nn::Mlp::Gradients g;
    CHECK(net.mse_and_gradients(x, y, g) < 1e-2);
    CHECK(net.all_finite());
}

TEST_CASE("same seed and data give bitwise-identical parameters") {
    auto run = [] {
        Rng rng(21);
        Mlp net = Mlp::random({3, 8, 2}, Activation::kSilu, rng);
        nn::OptimizerState opt(net);
        const Eigen::MatrixXd x = rng.normal_matrix(3, 16), y = rng.normal_matrix(2, 16);
        for (int k = 0; k < 50; ++k) nn::train_step(net, opt, x, y);
        return net.flat_parameters();
    };
    const Eigen::VectorXd a = run(), b = run();
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("checkpoint round trip is exact") {
    Rng rng(8);
    Mlp net = Mlp::random({4, 6, 3}, Activation::kSilu, rng, Activation::kSoftplus);
    std::stringstream ss;
    net.save(ss);
    const Mlp back = Mlp::load(ss);
    CHECK(back.layer_sizes() == net.layer_sizes());
    CHECK(back.hidden_activation() == net.hidden_activation());
    CHECK(back.output_activation() == net.output_activation());
    CHECK((back.flat_parameters() - net.flat_parameters()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("corrupt checkpoint is rejected") {
    std::stringstream ss("not-a-net 3\n");
    CHECK_THROWS_AS(Mlp::load(ss), FormatError);
}

}

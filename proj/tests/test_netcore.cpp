#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "ibmd/netcore.hpp"

using namespace ibmd;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-2}); }

/// Scalar probe loss sum(R .* f(x)) and its central-difference gradients.
struct ProbeLoss {
    Mat r;
    double operator()(const Mat& out) const { return (out.array() * r.array()).sum(); }
};

}  // namespace

TEST(Mlp, LinearLayerInputGradientIsColumnSums) {
    Mlp net({3, 2}, Activation::Tanh);
    net.weight(0) << 1.0, 2.0, 3.0, -4.0, 5.0, 0.5;
    Mlp::Tape tape;
    const Mat x = Mat::Random(3, 4);
    const Mat y = net.forward(x, tape);
    EXPECT_TRUE(y.isApprox(net.weight(0) * x));
    const Mat gin = net.backward(tape, Mat::Ones(2, 4), nullptr);
    const Vec col_sums = net.weight(0).colwise().sum().transpose();
    for (int j = 0; j < 4; ++j) EXPECT_EQ(Vec(gin.col(j)), col_sums);
}

TEST(Mlp, ZeroNetworkGivesZeroOutputAndInputGradient) {
    for (Activation act : {Activation::ReLU, Activation::SiLU, Activation::Tanh}) {
        Mlp net({4, 8, 8, 3}, act);
        Mlp::Tape tape;
        const Mat x = Mat::Random(4, 5);
        EXPECT_TRUE(net.forward(x, tape).isZero(0.0));
        Vec g = Vec::Zero(net.num_params());
        EXPECT_TRUE(net.backward(tape, Mat::Random(3, 5), &g).isZero(0.0));
        // Only the output bias sees a gradient.
        EXPECT_TRUE(g.head(g.size() - 3).isZero(0.0));
        EXPECT_FALSE(Vec(g.tail(3)).isZero(0.0));
    }
}

TEST(Mlp, ShapeMismatchThrows) {
    Mlp net({3, 4, 2}, Activation::SiLU);
    EXPECT_THROW(net.forward(Mat::Zero(2, 1)), std::invalid_argument);
    Mlp::Tape tape;
    net.forward(Mat::Zero(3, 2), tape);
    EXPECT_THROW(net.backward(tape, Mat::Zero(3, 2), nullptr), std::invalid_argument);
    Vec bad = Vec::Zero(3);
    EXPECT_THROW(net.backward(tape, Mat::Zero(2, 2), &bad), std::invalid_argument);
    EXPECT_THROW(Mlp({3}, Activation::SiLU), std::invalid_argument);
    EXPECT_THROW(Mlp({3, 0}, Activation::SiLU), std::invalid_argument);
}

TEST(Mlp, GradientsMatchCentralDifferences) {
    Rng rng(123);
    std::uniform_int_distribution<int> width(1, 32), dim(1, 8), depth(1, 3), act_pick(0, 2);
    const double h = 1e-4;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> widths{dim(rng)};
        const int hidden = depth(rng);
        for (int l = 0; l < hidden; ++l) widths.push_back(width(rng));
        widths.push_back(dim(rng));
        // ReLU kinks make central differences unreliable; use the smooth activations.
        const Activation act = act_pick(rng) == 0 ? Activation::Tanh : Activation::SiLU;
        Mlp net(widths, act, rng);
        const int n = 3;
        const Mat x = standard_normal(widths.front(), n, rng);
        const ProbeLoss loss{standard_normal(widths.back(), n, rng)};

        Mlp::Tape tape;
        net.forward(x, tape);
        Vec pg = Vec::Zero(net.num_params());
        const Mat xg = net.backward(tape, loss.r, &pg);

        for (Eigen::Index i = 0; i < net.num_params(); ++i) {
            const double keep = net.params()(i);
            net.params()(i) = keep + h;
            const double up = loss(net.forward(x));
            net.params()(i) = keep - h;
            const double dn = loss(net.forward(x));
            net.params()(i) = keep;
            worst = std::max(worst, rel_err(pg(i), (up - dn) / (2 * h)));
        }
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                Mat xp = x, xm = x;
                xp(i, j) += h;
                xm(i, j) -= h;
                worst = std::max(worst, rel_err(xg(i, j), (loss(net.forward(xp)) - loss(net.forward(xm))) / (2 * h)));
            }
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(X0Predictor, InputGradientsMatchCentralDifferences) {
    Rng rng(8);
    PredictorLayout layout;
    layout.dim = 2;
    layout.conditional = true;
    layout.noise_dim = 2;
    layout.hidden = {16, 16};
    X0Predictor p(layout, rng);
    // Give the zero-initialized output layer some weight so every path is exercised.
    auto& net = p.net();
    const std::size_t last = net.num_layers() - 1;
    for (Eigen::Index i = 0; i < net.weight(last).size(); ++i) net.weight(last).data()[i] = 0.3 * std::sin(1.0 + i);

    const int n = 4;
    const Mat xt = standard_normal(2, n, rng), xT = standard_normal(2, n, rng), z = standard_normal(2, n, rng);
    const Vec t = uniform_vector(n, 0.1, 0.9, rng);
    const ProbeLoss loss{standard_normal(2, n, rng)};
    X0Predictor::Tape tape;
    p.predict(xt, t, &xT, &z, tape);
    const X0Predictor::InputGrads g = p.backward(tape, loss.r, nullptr);

    const double h = 1e-4;
    auto check = [&](const Mat& analytic, int which) {
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < 2; ++i) {
                Mat a[3] = {xt, xT, z}, b[3] = {xt, xT, z};
                a[which](i, j) += h;
                b[which](i, j) -= h;
                const double fd =
                    (loss(p.predict(a[0], t, &a[1], &a[2])) - loss(p.predict(b[0], t, &b[1], &b[2]))) / (2 * h);
                EXPECT_LT(rel_err(analytic(i, j), fd), 1e-5) << "input " << which;
            }
    };
    check(g.xt, 0);
    check(g.xT, 1);
    check(g.z, 2);
}

TEST(X0Predictor, FreshPredictorIsIdentityOnXt) {
    Rng rng(4);
    PredictorLayout layout;
    layout.dim = 3;
    X0Predictor p(layout, rng);
    const Mat xt = standard_normal(3, 7, rng);
    EXPECT_EQ(p.predict(xt, Vec::Constant(7, 0.5)), xt);
    EXPECT_THROW(p.predict(xt, Vec::Constant(6, 0.5)), std::invalid_argument);
}

TEST(X0Predictor, ConditionalRequiresXT) {
    Rng rng(4);
    PredictorLayout layout;
    layout.dim = 2;
    layout.conditional = true;
    X0Predictor p(layout, rng);
    EXPECT_THROW(p.predict(Mat::Zero(2, 3), Vec::Zero(3)), std::invalid_argument);
}

TEST(TimeEmbedding, DimensionsAndLipschitz) {
    const TimeEmbedding scalar{EmbeddingMethod::ScalarAppend, 8, 2.0};
    EXPECT_EQ(scalar.dim(), 1);
    EXPECT_DOUBLE_EQ(scalar.embed(Vec::Constant(1, 1.0))(0, 0), 0.5);
    const TimeEmbedding sin{EmbeddingMethod::Sinusoidal, 8, 2.0};
    EXPECT_EQ(sin.dim(), 17);
    // Lipschitz constant of the feature map is bounded by sqrt(1 + sum_k (pi k)^2) / T.
    double bound = 1.0;
    for (int k = 1; k <= 8; ++k) bound += std::pow(std::numbers::pi * k, 2);
    bound = std::sqrt(bound) / 2.0;
    const Vec grid = Vec::LinSpaced(401, 0.0, 2.0);
    const Mat e = sin.embed(grid);
    for (Eigen::Index j = 1; j < grid.size(); ++j)
        EXPECT_LE((e.col(j) - e.col(j - 1)).norm(), bound * (grid(j) - grid(j - 1)) * (1 + 1e-9));
}

TEST(Adam, ZeroGradientKeepsParamsAndMovesEma) {
    Vec p = Vec::Constant(3, 1.0);
    OptimizerState opt(AdamConfig{}, p);
    p.setConstant(2.0);
    const Vec before = p;
    opt.step(p, Vec::Zero(3));
    EXPECT_EQ(p, before);
    const double d0 = 1.0;
    const double d1 = (opt.ema() - p).norm() / std::sqrt(3.0);
    EXPECT_LT(d1, d0);
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ConstantGradientStepsByLearningRate) {
    AdamConfig cfg;
    cfg.lr = 1e-3;
    Vec p = Vec::Zero(1);
    OptimizerState opt(cfg, p);
    for (int i = 0; i < 100; ++i) {
        const double before = p(0);
        opt.step(p, Vec::Constant(1, 0.37));
        if (i >= 10) EXPECT_NEAR(before - p(0), cfg.lr, 1e-6);
    }
}

TEST(Adam, QuadraticBowlConverges) {
    AdamConfig cfg;
    cfg.lr = 1e-2;
    Vec w = Vec::Constant(2, 0.0);
    const Vec target = (Vec(2) << 0.8, -0.6).finished();
    OptimizerState opt(cfg, w);
    for (int i = 0; i < 500; ++i) opt.step(w, w - target);
    EXPECT_LT((w - target).norm(), 1e-3);
}

TEST(Adam, RejectsNonFiniteGradientAndBadDecay) {
    Vec p = Vec::Zero(2);
    OptimizerState opt(AdamConfig{}, p);
    Vec g = Vec::Zero(2);
    g(1) = std::nan("");
    EXPECT_THROW(opt.step(p, g), NumericalError);
    AdamConfig bad;
    bad.ema_decay = 1.0;
    EXPECT_THROW(OptimizerState(bad, p), std::invalid_argument);
}

namespace {

/// Full-batch regression of a small net on a fixed target; returns (params, ema, distances).
struct FitRun {
    Vec params;
    Vec ema;
    std::vector<double> ema_gap;
};

FitRun fit(std::uint64_t seed, int steps) {
    Rng rng(seed);
    Mlp net({2, 16, 1}, Activation::Tanh, rng);
    const Mat x = standard_normal(2, 64, rng);
    const Mat y = (x.row(0).array().sin() + 0.5 * x.row(1).array()).matrix();
    AdamConfig cfg;
    cfg.lr = 3e-3;
    cfg.ema_decay = 0.95;
    OptimizerState opt(cfg, net.params());
    FitRun out;
    for (int i = 0; i < steps; ++i) {
        Mlp::Tape tape;
        const Mat pred = net.forward(x, tape);
        Vec g = Vec::Zero(net.num_params());
        net.backward(tape, 2.0 * (pred - y) / 64.0, &g);
        opt.step(net, g);
        out.ema_gap.push_back((opt.ema() - net.params()).norm());
    }
    out.params = net.params();
    out.ema = opt.ema();
    return out;
}

}  // namespace

TEST(Adam, DeterministicGivenSeed) {
    const FitRun a = fit(77, 100), b = fit(77, 100);
    EXPECT_EQ(std::memcmp(a.params.data(), b.params.data(), sizeof(double) * a.params.size()), 0);
    EXPECT_EQ(std::memcmp(a.ema.data(), b.ema.data(), sizeof(double) * a.ema.size()), 0);
}

TEST(Adam, EmaApproachesParamsOnPlateau) {
    const int steps = 3000;
    const FitRun r = fit(5, steps);
    const auto tail = static_cast<std::size_t>(0.8 * steps);
    EXPECT_LT(r.ema_gap.back(), r.ema_gap[tail]);
}

TEST(CloneInitialize, ZeroExtraIsBitwiseEqual) {
    Rng rng(9);
    const Mlp src({3, 12, 2}, Activation::SiLU, rng);
    const Mlp copy = clone_initialize(src, 0);
    const Mat x = standard_normal(3, 10, rng);
    const Mat a = src.forward(x), b = copy.forward(x);
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(CloneInitialize, ExtraChannelsIgnoredAtInitThenLearned) {
    Rng rng(10);
    const Mlp src({3, 12, 2}, Activation::SiLU, rng);
    Mlp net = clone_initialize(src, 2);
    const Mat x = standard_normal(3, 1, rng).replicate(1, 2);
    Mat in(5, 2);
    in.topRows(3) = x;
    in.bottomRows(2) << 1.0, -1.0, 0.5, 2.0;
    const Mat out0 = net.forward(in);
    const Mat ref = src.forward(x);
    EXPECT_EQ(out0, ref);
    EXPECT_THROW(clone_initialize(src, -1), std::invalid_argument);

    // One step on a loss whose target depends on z separates the outputs.
    Mlp::Tape tape;
    const Mat pred = net.forward(in, tape);
    Mat target = pred;
    target.row(0) += in.row(3);
    Vec g = Vec::Zero(net.num_params());
    net.backward(tape, pred - target, &g);
    OptimizerState opt(AdamConfig{}, net.params());
    opt.step(net, g);
    const Mat out1 = net.forward(in);
    EXPECT_NE(out1(0, 0), out1(0, 1));
}

TEST(Checkpoint, RoundTripIsExact) {
    Rng rng(12);
    const Mlp net({4, 7, 3}, Activation::Tanh, rng);
    const std::string bytes = serialize(net);
    const Mlp back = deserialize_mlp(bytes);
    EXPECT_EQ(back.widths(), net.widths());
    EXPECT_EQ(back.activation(), net.activation());
    EXPECT_EQ(std::memcmp(back.params().data(), net.params().data(), sizeof(double) * net.num_params()), 0);
    EXPECT_EQ(serialize(back), bytes);
    EXPECT_EQ(bytes.substr(0, 7), "IBMDNET");

    const auto path = (std::filesystem::temp_directory_path() / "ibmd_ckpt_test.bin").string();
    save_checkpoint(net, path);
    EXPECT_EQ(serialize(load_checkpoint(path)), bytes);
    std::remove(path.c_str());
}

TEST(Checkpoint, RejectsCorruptInput) {
    Rng rng(12);
    const std::string bytes = serialize(Mlp({2, 3}, Activation::ReLU, rng));
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_mlp(bad), std::runtime_error);
    EXPECT_THROW(deserialize_mlp(bytes.substr(0, bytes.size() - 4)), std::runtime_error);
    EXPECT_THROW(deserialize_mlp(bytes + "x"), std::runtime_error);
    EXPECT_THROW(load_checkpoint("/nonexistent/dir/ckpt.bin"), std::ios_base::failure);
}

TEST(Activation, StringRoundTrip) {
    for (Activation a : {Activation::ReLU, Activation::SiLU, Activation::Tanh})
        EXPECT_EQ(activation_from_string(to_string(a)), a);
    EXPECT_THROW(activation_from_string("gelu"), std::invalid_argument);
}

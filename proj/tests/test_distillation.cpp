#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "ibmd/distillation.hpp"
#include "ibmd/oracles.hpp"

using namespace ibmd;

namespace {

const Schedule kSched = Schedule::brownian(1.0, 1.0);

X0Predictor random_predictor(int dim, bool conditional, std::uint64_t seed, std::vector<int> hidden = {16, 16}) {
    PredictorLayout l;
    l.dim = dim;
    l.conditional = conditional;
    l.hidden = std::move(hidden);
    l.embedding = TimeEmbedding{EmbeddingMethod::Sinusoidal, 2, 1.0};
    Rng rng(seed);
    X0Predictor p(l, rng);
    // Non-zero output layer so the predictor is not the identity.
    p.net().params() += 0.2 * standard_normal(p.net().num_params(), 1, rng).col(0);
    return p;
}

Coupling gaussian_2d() {
    Mat s00(2, 2), sTT = Mat::Identity(2, 2), s0T(2, 2);
    s00 << 0.5, 0.1, 0.1, 0.4;
    s0T << 0.3, 0.0, 0.1, 0.2;
    return Coupling::gaussian_joint(Vec::Constant(2, 1.0), Vec::Zero(2), s00, sTT, s0T);
}

struct FixedBatch {
    Mat xT, z, eps;
    Vec t;
    TrainingInputs inputs;
};

FixedBatch fixed_batch(const Generator& gen, const Coupling& c, int n, std::uint64_t seed) {
    Rng rng(seed);
    FixedBatch b;
    b.xT = c.sample_corrupted(n, rng);
    b.inputs = multistep_train_batch(gen, kSched, b.xT, MultistepStyle::SampledTime, rng);
    b.z = gen.sample_noise(n, rng);
    b.t = sample_times(kSched, n, rng);
    b.eps = standard_normal(b.xT.rows(), n, rng);
    return b;
}

}  // namespace

TEST(Generator, FromTeacherIgnoresNoiseAtInit) {
    const X0Predictor teacher = random_predictor(2, false, 1);
    const Generator gen = Generator::from_teacher(teacher, 3, 1, 1.0);
    EXPECT_EQ(gen.noise_dim(), 3);
    Rng rng(2);
    const Mat xT = standard_normal(2, 20, rng);
    const Vec tT = Vec::Constant(20, 1.0);
    const Mat want = teacher.predict(xT, tT);
    EXPECT_EQ(gen.one_step(xT, rng), want);
    EXPECT_EQ(gen.one_step(xT, rng), want);
    EXPECT_THROW(Generator(teacher, 0, 1.0), std::invalid_argument);
}

TEST(GeneratorObjective, CancelsExactlyWhenPhiIsTeacher) {
    const Coupling c = gaussian_2d();
    for (bool conditional : {false, true}) {
        const X0Predictor teacher = random_predictor(2, conditional, 3);
        Generator gen = Generator::from_teacher(teacher, 2, 1, 1.0);
        Rng rng(4);
        gen.net().net().params() += 0.1 * standard_normal(gen.net().net().num_params(), 1, rng).col(0);
        const FixedBatch b = fixed_batch(gen, c, 128, 5);
        const X0Predictor phi = teacher;
        const GeneratorLoss gl =
            generator_objective(gen, teacher, phi, kSched, Weighting::one(), b.xT, b.inputs, b.z, b.t, b.eps);
        EXPECT_EQ(gl.loss, 0.0);
        EXPECT_TRUE(gl.grad.isZero(0.0));
        EXPECT_FALSE(std::signbit(gl.loss) && gl.loss != 0.0);
    }
}

TEST(GeneratorObjective, GradientMatchesFiniteDifferences) {
    const Coupling c = gaussian_2d();
    for (bool conditional : {false, true}) {
        const X0Predictor teacher = random_predictor(2, conditional, 6);
        const X0Predictor phi = random_predictor(2, conditional, 7);
        Generator gen = Generator::from_teacher(teacher, 2, 1, 1.0);
        Rng rng(8);
        gen.net().net().params() += 0.1 * standard_normal(gen.net().net().num_params(), 1, rng).col(0);
        const FixedBatch b = fixed_batch(gen, c, 16, 9);
        const Weighting lambda = Weighting::from_table({{0.0, 0.5}, {1.0, 2.0}});
        auto loss = [&] {
            return generator_objective(gen, teacher, phi, kSched, lambda, b.xT, b.inputs, b.z, b.t, b.eps).loss;
        };
        const Vec grad = generator_objective(gen, teacher, phi, kSched, lambda, b.xT, b.inputs, b.z, b.t, b.eps).grad;
        Vec& p = gen.net().net().params();
        const double h = 1e-5;
        double worst = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double keep = p(i);
            p(i) = keep + h;
            const double up = loss();
            p(i) = keep - h;
            const double dn = loss();
            p(i) = keep;
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(fd - grad(i)) / std::max({std::abs(fd), std::abs(grad(i)), 1e-2}));
        }
        EXPECT_LT(worst, 1e-5) << "conditional = " << conditional;
    }
}

TEST(MultistepTrainBatch, SingleStepUsesXTDirectly) {
    const X0Predictor teacher = random_predictor(2, false, 10);
    const Generator gen = Generator::from_teacher(teacher, 1, 1, 1.0);
    Rng rng(11);
    const Mat xT = standard_normal(2, 32, rng);
    for (MultistepStyle style : {MultistepStyle::FullInference, MultistepStyle::SampledTime}) {
        const TrainingInputs in = multistep_train_batch(gen, kSched, xT, style, rng);
        EXPECT_EQ(in.xt, xT);
        EXPECT_TRUE((in.t.array() == 1.0).all());
    }
    EXPECT_EQ(gen.evaluations(), 0);
}

TEST(MultistepTrainBatch, TopOfGridNeedsNoInference) {
    const X0Predictor teacher = random_predictor(2, false, 12);
    const Generator gen = Generator::from_teacher(teacher, 1, 4, 1.0);
    Rng rng(13);
    const Mat xT = standard_normal(2, 32, rng);
    for (MultistepStyle style : {MultistepStyle::FullInference, MultistepStyle::SampledTime}) {
        const TrainingInputs in = multistep_train_batch(gen, kSched, xT, style, rng, 4);
        EXPECT_EQ(in.xt, xT);
    }
    EXPECT_EQ(gen.evaluations(), 0);
    EXPECT_THROW(multistep_train_batch(gen, kSched, xT, MultistepStyle::SampledTime, rng, 0), std::invalid_argument);
}

TEST(MultistepTrainBatch, EvaluationCounts) {
    const X0Predictor teacher = random_predictor(2, false, 14);
    const Generator gen = Generator::from_teacher(teacher, 1, 4, 1.0);
    Rng rng(15);
    const int n = 25;
    const Mat xT = standard_normal(2, n, rng);
    for (int idx : {1, 2, 3}) {
        gen.reset_evaluations();
        const TrainingInputs full = multistep_train_batch(gen, kSched, xT, MultistepStyle::FullInference, rng, idx);
        EXPECT_EQ(gen.evaluations(), 4 * n) << "index " << idx;
        EXPECT_TRUE((full.t.array() == idx / 4.0).all());
        gen.reset_evaluations();
        const TrainingInputs walk = multistep_train_batch(gen, kSched, xT, MultistepStyle::SampledTime, rng, idx);
        EXPECT_EQ(gen.evaluations(), (4 - idx) * n) << "index " << idx;
        EXPECT_TRUE((walk.t.array() == idx / 4.0).all());
        EXPECT_TRUE(full.xt.allFinite() && walk.xt.allFinite());
    }
    gen.reset_evaluations();
    const TrainingInputs mixed = multistep_train_batch(gen, kSched, xT, MultistepStyle::SampledTime, rng);
    for (int j = 0; j < n; ++j) {
        const double k = mixed.t(j) * 4.0;
        EXPECT_EQ(k, std::round(k));
        EXPECT_GE(k, 1.0);
    }
}

TEST(MultistepInfer, CallCountsAndDeterministicLastStep) {
    const X0Predictor teacher = random_predictor(2, false, 16);
    const Generator gen = Generator::from_teacher(teacher, 2, 4, 1.0);
    Rng rng(17);
    const int n = 10;
    const Mat xT = standard_normal(2, n, rng);
    gen.reset_evaluations();
    const Mat one = multistep_infer(gen, kSched, xT, rng, 1);
    EXPECT_EQ(gen.evaluations(), n);
    Rng r0(3);
    EXPECT_EQ(one, gen.one_step(xT, r0));
    gen.reset_evaluations();
    multistep_infer(gen, kSched, xT, rng);
    EXPECT_EQ(gen.evaluations(), 4 * n);
}

TEST(FakeBridgeUpdate, LossScalesWithLambda) {
    const Coupling c = gaussian_2d();
    const CorruptedSampler sampler(c);
    const X0Predictor teacher = random_predictor(2, false, 18);
    const Generator gen = Generator::from_teacher(teacher, 2, 1, 1.0);
    X0Predictor p1 = teacher, p2 = teacher;
    OptimizerState o1(AdamConfig{}, p1.net().params()), o2(AdamConfig{}, p2.net().params());
    Rng r1(19), r2(19);
    const double l1 = fake_bridge_update(p1, o1, gen, sampler, kSched, Weighting::one(), 64,
                                         MultistepStyle::SampledTime, r1);
    const double l2 = fake_bridge_update(p2, o2, gen, sampler, kSched, Weighting::constant(2.0), 64,
                                         MultistepStyle::SampledTime, r2);
    EXPECT_DOUBLE_EQ(l2, 2.0 * l1);
    EXPECT_EQ(c.clean_draws(), 0);
}

TEST(Distill, ZeroRoundsReturnsInitialGenerator) {
    const Coupling c = gaussian_2d();
    const X0Predictor teacher = random_predictor(2, false, 20);
    DistillConfig cfg;
    cfg.K = 0;
    Rng rng(21);
    const DistillResult r = distill(teacher, CorruptedSampler(c), kSched, cfg, rng);
    const Generator init = Generator::from_teacher(teacher, cfg.noise_dim, cfg.steps, 1.0);
    EXPECT_EQ(serialize(r.generator.net().net()), serialize(init.net().net()));
    EXPECT_TRUE(r.losses.empty());
}

TEST(Distill, ValidatesConfig) {
    DistillConfig cfg;
    cfg.L = 0;
    EXPECT_THROW(validate(cfg), std::invalid_argument);
    cfg = DistillConfig{};
    cfg.K = -1;
    EXPECT_THROW(validate(cfg), std::invalid_argument);
    cfg = DistillConfig{};
    EXPECT_EQ(cfg.L, 5);
    EXPECT_EQ(cfg.generator_adam.ema_decay, 0.99);
    EXPECT_EQ(cfg.batch_size, 256);
}

TEST(Distill, NeverReadsCleanDataAndCallsObserver) {
    const Coupling c = gaussian_2d();
    const X0Predictor teacher = random_predictor(2, false, 22, {8});
    DistillConfig cfg;
    cfg.K = 6;
    cfg.L = 2;
    cfg.batch_size = 32;
    cfg.steps = 2;
    cfg.style = MultistepStyle::FullInference;
    int calls = 0;
    Rng rng(23);
    const DistillResult r =
        distill(teacher, CorruptedSampler(c), kSched, cfg, rng, [&](int round, const Generator&, const X0Predictor&) {
            EXPECT_EQ(round, ++calls);
        });
    EXPECT_EQ(calls, 6);
    EXPECT_EQ(r.losses.size(), 6u);
    EXPECT_EQ(c.clean_draws(), 0);
    EXPECT_EQ(r.generator.steps(), 2);
}

TEST(Distill, DeterministicGivenSeed) {
    const Coupling c = gaussian_2d();
    const X0Predictor teacher = random_predictor(2, true, 24, {8});
    DistillConfig cfg;
    cfg.K = 5;
    cfg.L = 2;
    cfg.batch_size = 16;
    Rng a(25), b(25);
    const DistillResult ra = distill(teacher, CorruptedSampler(c), kSched, cfg, a);
    const DistillResult rb = distill(teacher, CorruptedSampler(c), kSched, cfg, b);
    EXPECT_EQ(serialize(ra.generator.net().net()), serialize(rb.generator.net().net()));
    EXPECT_EQ(serialize(ra.bridge.net()), serialize(rb.bridge.net()));
}

TEST(Distill, ConstantTeacherCollapsesGenerator) {
    // x0_hat = x_t + (-x_t + c) = c exactly, for a single-atom corrupted law.
    const Vec target = (Vec(2) << 0.6, -0.3).finished();
    const Coupling c = Coupling::finite_support({Atom{target, Vec::Constant(2, 1.0), 1.0}});
    PredictorLayout l;
    l.dim = 2;
    l.hidden = {};
    l.embedding = TimeEmbedding{EmbeddingMethod::ScalarAppend, 0, 1.0};
    Rng rng(26);
    X0Predictor teacher(l, rng);
    teacher.net().weight(0).leftCols(2) = -Mat::Identity(2, 2);
    teacher.net().bias(0) = target;

    // Start the generator away from the optimum, with active noise channels.
    Generator gen = Generator::from_teacher(teacher, 2, 1, 1.0);
    gen.net().net().params() += 0.3 * standard_normal(gen.net().net().num_params(), 1, rng).col(0);
    auto spread_of = [&](const Generator& g) {
        Rng r(5);
        const Mat out = g.one_step(Vec::Constant(2, 1.0).replicate(1, 1000), r);
        return std::sqrt((out.colwise() - out.rowwise().mean()).squaredNorm() / 1000.0);
    };
    const double spread0 = spread_of(gen);
    X0Predictor phi = teacher;
    AdamConfig adam{1e-2, 0.9, 0.999, 1e-8, 0.99};
    OptimizerState gopt(adam, gen.net().net().params()), popt(adam, phi.net().params());
    const CorruptedSampler sampler(c);
    for (int k = 0; k < 1500; ++k) {
        for (int i = 0; i < 5; ++i)
            fake_bridge_update(phi, popt, gen, sampler, kSched, Weighting::one(), 64, MultistepStyle::SampledTime, rng);
        generator_update(gen, gopt, teacher, phi, sampler, kSched, Weighting::one(), 64, MultistepStyle::SampledTime,
                         rng);
    }
    gen.net().net().params() = gopt.ema();
    const Mat out = gen.one_step(Vec::Constant(2, 1.0).replicate(1, 1000), rng);
    const Vec mean = out.rowwise().mean();
    // The variance signal is proportional to the spread, so SGD noise sets a
    // floor; ask for a 20x contraction.
    EXPECT_GT(spread0, 0.3);
    EXPECT_LT(spread_of(gen), 0.05 * spread0);
    EXPECT_LT((mean - target).norm(), 1e-2);
}

TEST(GeneratorObjective, PopulationValueNonNegativeAfterInnerFit) {
    const Coupling c = gaussian_2d();
    const CorruptedSampler sampler(c);
    const X0Predictor teacher = random_predictor(2, false, 27);
    Generator gen = Generator::from_teacher(teacher, 2, 1, 1.0);
    Rng rng(28);
    gen.net().net().params() += 0.05 * standard_normal(gen.net().net().num_params(), 1, rng).col(0);
    const X0Predictor phi = fit_bridge_to_generator(teacher, gen, sampler, kSched, Weighting::one(), 3000, 128,
                                                    AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.99},
                                                    MultistepStyle::SampledTime, rng);
    detail::RunningMoments m;
    for (int chunk = 0; chunk < 100; ++chunk) {
        const FixedBatch b = fixed_batch(gen, c, 100, 1000 + chunk);
        m.add(generator_objective(gen, teacher, phi, kSched, Weighting::one(), b.xT, b.inputs, b.z, b.t, b.eps).loss);
    }
    EXPECT_GE(m.mean(), -2.0 * m.stderr_of_mean());
}

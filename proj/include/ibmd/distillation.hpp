#pragma once

// Inverse bridge matching distillation.
//
// A generator G(x_T, z) (or G(x_t, z, t) in multi-step mode) induces a coupling
// p_theta(x0, x_T). Its bridge-matching drift is tracked by an auxiliary
// "fake bridge" predictor phi; the generator is then updated on
//   E lambda(t) [ ||x0*_hat(x_t, t) - x0||^2 - ||x0phi_hat(x_t, t) - x0||^2 ]
// with x0 = G(.), x_t ~ q(x_t | x0, x_T), backpropagating through the inputs
// of both frozen predictors.

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ibmd/bridges.hpp"
#include "ibmd/matching.hpp"
#include "ibmd/netcore.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/types.hpp"

namespace ibmd {

enum class MultistepStyle { FullInference, SampledTime };

inline const char* to_string(MultistepStyle s) {
    return s == MultistepStyle::FullInference ? "full_inference" : "sampled_time";
}

/// Stochastic few-step generator. The network has the teacher's input layout
/// plus `noise_dim` trailing noise channels. With steps == 1 it is evaluated
/// only at (x_t = x_T, t = T).
class Generator {
public:
    Generator() = default;

    Generator(X0Predictor net, int steps, double horizon) : net_(std::move(net)), steps_(steps), horizon_(horizon) {
        if (steps < 1) throw std::invalid_argument("Generator: steps must be >= 1");
    }

    /// Teacher clone with zero-weighted noise channels appended.
    static Generator from_teacher(const X0Predictor& teacher, int noise_dim, int steps, double horizon) {
        return Generator(teacher.with_noise_channels(noise_dim), steps, horizon);
    }

    X0Predictor& net() { return net_; }
    const X0Predictor& net() const { return net_; }
    int steps() const { return steps_; }
    double horizon() const { return horizon_; }
    int noise_dim() const { return net_.noise_dim(); }
    bool conditional() const { return net_.conditional(); }

    /// Grid t_0 = 0 < t_1 < ... < t_N = T.
    std::vector<double> grid() const { return uniform_grid(horizon_, steps_); }

    /// Column evaluations performed so far (each predict call adds its batch size).
    long evaluations() const { return evaluations_; }
    void reset_evaluations() const { evaluations_ = 0; }

    Mat sample_noise(Eigen::Index n, Rng& rng) const {
        return noise_dim() > 0 ? standard_normal(noise_dim(), n, rng) : Mat(0, n);
    }

    Mat predict(const Mat& xt, const Vec& t, const Mat& xT, const Mat& z) const {
        evaluations_ += xt.cols();
        return net_.predict(xt, t, conditional() ? &xT : nullptr, noise_dim() > 0 ? &z : nullptr);
    }

    Mat predict(const Mat& xt, const Vec& t, const Mat& xT, const Mat& z, X0Predictor::Tape& tape) const {
        evaluations_ += xt.cols();
        return net_.predict(xt, t, conditional() ? &xT : nullptr, noise_dim() > 0 ? &z : nullptr, tape);
    }

    /// One-step draw x0 = G(x_T, z).
    Mat one_step(const Mat& xT, Rng& rng) const {
        return predict(xT, Vec::Constant(xT.cols(), horizon_), xT, sample_noise(xT.cols(), rng));
    }

    /// Predictor view for simulate_reverse; draws fresh noise per call.
    PredictorFn as_predictor() const {
        return [this](const Mat& xt, const Vec& t, const Mat& xT, Rng& rng) {
            return predict(xt, t, xT, sample_noise(xt.cols(), rng));
        };
    }

private:
    X0Predictor net_;
    int steps_ = 1;
    double horizon_ = 1.0;
    mutable long evaluations_ = 0;
};

/// Alternate generator prediction and bridge posterior sampling on an
/// N-point uniform grid (N defaults to the generator's training grid).
inline Mat multistep_infer(const Generator& gen, const Schedule& s, const Mat& xT, Rng& rng,
                           std::optional<int> steps = std::nullopt) {
    return simulate_reverse(s, gen.as_predictor(), xT, steps.value_or(gen.steps()), ReverseMode::Posterior, rng)
        .terminal();
}

struct TrainingInputs {
    Mat xt;
    Vec t;
};

namespace detail {

inline Mat gather(const Mat& m, const std::vector<Eigen::Index>& cols) {
    Mat out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(cols[k]);
    return out;
}

}  // namespace detail

/// Generator inputs (x_{t_n}, t_n) for multi-step training, one per column of x_T.
///
/// The grid index n is drawn uniformly from {1..N} per column unless
/// `fixed_index` is given. For t_n = T the input is x_T itself and no
/// generator call is made.
///   FullInference: run all N prediction/posterior steps from x_T to get
///                  x0~, then draw x_{t_n} ~ q(x_{t_n} | x0~, x_T).
///   SampledTime:   run the posterior chain from T down to t_n only.
inline TrainingInputs multistep_train_batch(const Generator& gen, const Schedule& s, const Mat& xT,
                                            MultistepStyle style, Rng& rng,
                                            std::optional<int> fixed_index = std::nullopt) {
    const int steps = gen.steps();
    const Eigen::Index n = xT.cols();
    const double horizon = s.horizon();
    TrainingInputs out{xT, Vec::Constant(n, horizon)};
    if (steps == 1) return out;

    const std::vector<double> grid = gen.grid();
    std::vector<int> idx(static_cast<std::size_t>(n), steps);
    std::uniform_int_distribution<int> pick(1, steps);
    for (auto& k : idx) k = fixed_index ? *fixed_index : pick(rng);
    for (int k : idx)
        if (k < 1 || k > steps) throw std::invalid_argument("multistep_train_batch: grid index out of range");

    std::vector<Eigen::Index> active;
    for (Eigen::Index j = 0; j < n; ++j)
        if (idx[static_cast<std::size_t>(j)] < steps) active.push_back(j);
    if (active.empty()) return out;

    const Mat xT_a = detail::gather(xT, active);
    const PredictorFn pred = gen.as_predictor();
    if (style == MultistepStyle::FullInference) {
        const Mat x0 = simulate_reverse(s, pred, xT_a, steps, ReverseMode::Posterior, rng).terminal();
        const Mat eps = standard_normal(xT.rows(), static_cast<Eigen::Index>(active.size()), rng);
        for (std::size_t k = 0; k < active.size(); ++k) {
            const Eigen::Index j = active[k];
            const double tn = grid[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];
            const BridgeCoeffs c = bridge_coeffs(s, tn);
            const auto kk = static_cast<Eigen::Index>(k);
            out.xt.col(j) = c.a * xT_a.col(kk) + c.b * x0.col(kk) + c.c() * eps.col(kk);
            out.t(j) = tn;
        }
        return out;
    }

    // SampledTime: walk the whole batch down level by level; a column stops
    // once it reaches its own t_n.
    Mat x = xT_a;
    for (int level = steps; level >= 2; --level) {
        std::vector<Eigen::Index> moving;
        for (std::size_t k = 0; k < active.size(); ++k)
            if (idx[static_cast<std::size_t>(active[k])] < level) moving.push_back(static_cast<Eigen::Index>(k));
        if (moving.empty()) continue;
        const double t_hi = grid[static_cast<std::size_t>(level)];
        const double t_lo = grid[static_cast<std::size_t>(level - 1)];
        const Mat xm = detail::gather(x, moving);
        const Mat x0hat = pred(xm, Vec::Constant(xm.cols(), t_hi), detail::gather(xT_a, moving), rng);
        const BridgeCoeffs c = bridge_coeffs_on_interval(s, t_lo, t_hi);
        const Mat eps = standard_normal(xm.rows(), xm.cols(), rng);
        for (std::size_t k = 0; k < moving.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            x.col(moving[k]) = c.a * xm.col(kk) + c.b * x0hat.col(kk) + c.c() * eps.col(kk);
        }
    }
    for (std::size_t k = 0; k < active.size(); ++k) {
        const Eigen::Index j = active[k];
        out.xt.col(j) = x.col(static_cast<Eigen::Index>(k));
        out.t(j) = grid[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];
    }
    return out;
}

/// Frozen-generator draw of x0 given x_T, following the training-input
/// convention of the generator (one-step or multi-step).
inline Mat generator_training_x0(const Generator& gen, const Schedule& s, const Mat& xT, MultistepStyle style,
                                 Rng& rng) {
    const TrainingInputs in = multistep_train_batch(gen, s, xT, style, rng);
    return gen.predict(in.xt, in.t, xT, gen.sample_noise(xT.cols(), rng));
}

using X0Sampler = std::function<Mat(const Mat&, Rng&)>;

/// One gradient step of the fake bridge on the coupling x_T ~ sampler,
/// x0 = produce_x0(x_T). Returns the batch loss before the step.
inline double fake_bridge_update(X0Predictor& phi, OptimizerState& opt, const X0Sampler& produce_x0,
                                 const CorruptedSampler& sampler, const Schedule& s, const Weighting& lambda,
                                 int batch_size, Rng& rng) {
    Mat xT = sampler.sample(batch_size, rng);
    Mat x0 = produce_x0(xT, rng);
    const BridgeBatch batch = make_bridge_batch(s, std::move(x0), std::move(xT), rng);
    LossAndGrad lg = bm_loss(phi, batch, lambda);
    opt.step(phi.net(), lg.grad);
    return lg.loss;
}

inline double fake_bridge_update(X0Predictor& phi, OptimizerState& opt, const Generator& gen,
                                 const CorruptedSampler& sampler, const Schedule& s, const Weighting& lambda,
                                 int batch_size, MultistepStyle style, Rng& rng) {
    const X0Sampler produce = [&](const Mat& xT, Rng& r) { return generator_training_x0(gen, s, xT, style, r); };
    return fake_bridge_update(phi, opt, produce, sampler, s, lambda, batch_size, rng);
}

struct GeneratorLoss {
    double loss = 0.0;
    Vec grad;
};

/// Signed generator objective and its theta-gradient on a fixed batch.
/// `xT`, `inputs`, `z`, `t` and `eps` fully determine the batch, so this is
/// a pure function of the networks.
inline GeneratorLoss generator_objective(const Generator& gen, const X0Predictor& teacher, const X0Predictor& phi,
                                         const Schedule& s, const Weighting& lambda, const Mat& xT,
                                         const TrainingInputs& inputs, const Mat& z, const Vec& t, const Mat& eps) {
    const Eigen::Index n = xT.cols();
    X0Predictor::Tape gtape, ttape, ptape;
    const Mat x0 = gen.predict(inputs.xt, inputs.t, xT, z, gtape);

    Mat xt(x0.rows(), n);
    Vec b(n), w(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const BridgeCoeffs c = bridge_coeffs(s, t(j));
        xt.col(j) = c.a * xT.col(j) + c.b * x0.col(j) + c.c() * eps.col(j);
        b(j) = c.b;
        w(j) = lambda(t(j));
    }
    const Mat* cond = teacher.conditional() ? &xT : nullptr;
    const Mat pt = teacher.predict(xt, t, cond, nullptr, ttape);
    const Mat pp = phi.predict(xt, t, phi.conditional() ? &xT : nullptr, nullptr, ptape);

    const Mat dt = pt - x0;
    const Mat dp = pp - x0;
    GeneratorLoss out;
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) total += w(j) * (dt.col(j).squaredNorm() - dp.col(j).squaredNorm());
    out.loss = total / static_cast<double>(n);

    const Vec scale = 2.0 / static_cast<double>(n) * w;
    const Mat up_teacher = dt * scale.asDiagonal();
    const Mat up_phi = -(dp * scale.asDiagonal());
    const Mat gx_teacher = teacher.backward(ttape, up_teacher, nullptr).xt;
    const Mat gx_phi = phi.backward(ptape, up_phi, nullptr).xt;
    // d/dx0 of both squared errors directly, plus the path through x_t.
    Mat gx0 = -up_teacher - up_phi;
    gx0 += (gx_teacher + gx_phi) * b.asDiagonal();

    out.grad = Vec::Zero(gen.net().net().num_params());
    gen.net().backward(gtape, gx0, &out.grad);
    return out;
}

/// One gradient step on theta with teacher and phi frozen. Returns the signed
/// batch objective (may be negative).
inline double generator_update(Generator& gen, OptimizerState& opt, const X0Predictor& teacher,
                               const X0Predictor& phi, const CorruptedSampler& sampler, const Schedule& s,
                               const Weighting& lambda, int batch_size, MultistepStyle style, Rng& rng) {
    const Mat xT = sampler.sample(batch_size, rng);
    const TrainingInputs in = multistep_train_batch(gen, s, xT, style, rng);
    const Mat z = gen.sample_noise(batch_size, rng);
    const Vec t = sample_times(s, batch_size, rng);
    const Mat eps = standard_normal(xT.rows(), batch_size, rng);
    GeneratorLoss gl = generator_objective(gen, teacher, phi, s, lambda, xT, in, z, t, eps);
    if (!std::isfinite(gl.loss)) throw NumericalError("generator_update: non-finite loss");
    opt.step(gen.net().net(), gl.grad);
    return gl.loss;
}

struct DistillConfig {
    /// Generator rounds.
    int K = 1000;
    /// Fake-bridge updates per round.
    int L = 5;
    int batch_size = 256;
    AdamConfig generator_adam{1e-3, 0.9, 0.999, 1e-8, 0.99};
    AdamConfig bridge_adam{1e-3, 0.9, 0.999, 1e-8, 0.99};
    Weighting lambda = Weighting::one();
    /// Number of generator steps N (1 = one-step generator).
    int steps = 1;
    MultistepStyle style = MultistepStyle::SampledTime;
    int noise_dim = 2;
};

struct RoundLoss {
    int round = 0;
    double bridge_loss = 0.0;
    double generator_loss = 0.0;
};

struct DistillResult {
    /// EMA generator.
    Generator generator;
    /// Final fake bridge (raw parameters).
    X0Predictor bridge;
    std::vector<RoundLoss> losses;
};

/// Called after round `round` (1-based) with the EMA generator and current phi.
using DistillObserver = std::function<void(int round, const Generator& ema, const X0Predictor& phi)>;

inline void validate(const DistillConfig& cfg) {
    if (cfg.K < 0) throw std::invalid_argument("distill: K must be >= 0");
    if (cfg.L < 1) throw std::invalid_argument("distill: L must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("distill: batch size must be >= 1");
    if (cfg.steps < 1) throw std::invalid_argument("distill: steps must be >= 1");
    if (cfg.noise_dim < 0) throw std::invalid_argument("distill: noise_dim must be >= 0");
}

/// K rounds of (L fake-bridge updates, one generator update), starting both
/// phi and the generator from the teacher. Only x_T samples are consumed.
inline DistillResult distill(const X0Predictor& teacher, const CorruptedSampler& sampler, const Schedule& s,
                             const DistillConfig& cfg, Rng& rng, const DistillObserver& observer = {}) {
    validate(cfg);
    if (sampler.dim() != teacher.dim()) throw std::invalid_argument("distill: sampler/teacher dimension mismatch");
    Generator gen = Generator::from_teacher(teacher, cfg.noise_dim, cfg.steps, s.horizon());
    X0Predictor phi = teacher;
    OptimizerState gen_opt(cfg.generator_adam, gen.net().net().params());
    OptimizerState phi_opt(cfg.bridge_adam, phi.net().params());
    Generator ema = gen;

    DistillResult out;
    out.losses.reserve(static_cast<std::size_t>(cfg.K));
    for (int k = 1; k <= cfg.K; ++k) {
        RoundLoss rl;
        rl.round = k;
        double phi_total = 0.0;
        for (int l = 0; l < cfg.L; ++l)
            phi_total += fake_bridge_update(phi, phi_opt, gen, sampler, s, cfg.lambda, cfg.batch_size, cfg.style, rng);
        rl.bridge_loss = phi_total / cfg.L;
        rl.generator_loss =
            generator_update(gen, gen_opt, teacher, phi, sampler, s, cfg.lambda, cfg.batch_size, cfg.style, rng);
        if (!std::isfinite(rl.bridge_loss) || std::abs(rl.generator_loss) > 1e6 || rl.bridge_loss > 1e6) {
            std::ostringstream os;
            os << "distillation diverged at round " << k << " (bridge loss " << rl.bridge_loss
               << ", generator loss " << rl.generator_loss << ")";
            throw NumericalError(os.str());
        }
        out.losses.push_back(rl);
        ema.net().net().params() = gen_opt.ema();
        if (observer) observer(k, ema, phi);
    }
    ema.net().net().params() = cfg.K > 0 ? gen_opt.ema() : gen.net().net().params();
    ema.reset_evaluations();
    out.generator = std::move(ema);
    out.bridge = std::move(phi);
    return out;
}

/// Fits a fresh fake bridge (initialized from `init`) to a frozen generator;
/// its result approximates the bridge-matching drift of the generator coupling.
inline X0Predictor fit_bridge_to_generator(const X0Predictor& init, const Generator& gen,
                                           const CorruptedSampler& sampler, const Schedule& s,
                                           const Weighting& lambda, int iterations, int batch_size,
                                           const AdamConfig& adam, MultistepStyle style, Rng& rng) {
    X0Predictor phi = init;
    OptimizerState opt(adam, phi.net().params());
    for (int i = 0; i < iterations; ++i)
        fake_bridge_update(phi, opt, gen, sampler, s, lambda, batch_size, style, rng);
    phi.net().params() = opt.ema();
    return phi;
}

}  // namespace ibmd

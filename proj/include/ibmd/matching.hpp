#pragma once

// Data couplings p(x0, xT) and teacher training by the x0-reparameterized
// bridge-matching regression
//   min E[ lambda(t) || x0_hat(x_t, t[, x_T]) - x0 ||^2 ],
//   (x0, xT) ~ p, t ~ U[t_min, T], x_t ~ q(x_t | x0, xT).

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ibmd/bridges.hpp"
#include "ibmd/netcore.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/types.hpp"

namespace ibmd {

// ---------------------------------------------------------------------------
// Distributions used to build couplings

struct GaussianSpec {
    Vec mean;
    Mat cov;
};

/// Isotropic Gaussian mixture.
struct MixtureSpec {
    std::vector<double> weights;
    std::vector<Vec> means;
    std::vector<double> stds;
};

struct Atom {
    Vec x0;
    Vec xT;
    double weight = 1.0;
};

/// x0 = (u, w) with u ~ N(0, 1) and w drawn from `modes` equally likely
/// modes spaced evenly on [-offset, offset] with width `spread`; x_T = (u, 0)
/// reveals only the first coordinate.
struct MaskedSpec {
    double offset = 1.5;
    double spread = 0.25;
    int modes = 2;
};

namespace detail {

/// Symmetric square root factor L with L L^T = cov (cov may be singular PSD).
inline Mat psd_factor(const Mat& cov) {
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    if (es.info() != Eigen::Success) throw std::invalid_argument("covariance eigendecomposition failed");
    if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff()))
        throw std::invalid_argument("covariance is not positive semidefinite");
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

inline std::size_t draw_index(const std::vector<double>& cumulative, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, cumulative.back());
    const double r = u(rng);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

inline std::vector<double> cumulative(const std::vector<double>& w) {
    std::vector<double> c(w.size());
    std::partial_sum(w.begin(), w.end(), c.begin());
    return c;
}

}  // namespace detail

inline Mat sample_gaussian(const GaussianSpec& g, Eigen::Index n, Rng& rng) {
    const Mat l = detail::psd_factor(g.cov);
    Mat out = l * standard_normal(g.mean.size(), n, rng);
    out.colwise() += g.mean;
    return out;
}

inline Mat sample_mixture(const MixtureSpec& m, Eigen::Index n, Rng& rng) {
    if (m.weights.empty() || m.weights.size() != m.means.size() || m.means.size() != m.stds.size())
        throw std::invalid_argument("mixture: weights/means/stds must be non-empty and of equal length");
    const auto cum = detail::cumulative(m.weights);
    const Eigen::Index d = m.means.front().size();
    std::normal_distribution<double> n01(0.0, 1.0);
    Mat out(d, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const std::size_t k = detail::draw_index(cum, rng);
        for (Eigen::Index i = 0; i < d; ++i) out(i, j) = m.means[k](i) + m.stds[k] * n01(rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Couplings

enum class CouplingKind { IndependentProduct, AnalyticGaussianJoint, FiniteSupport, Masked, GeneratorInduced };

inline const char* to_string(CouplingKind k) {
    switch (k) {
        case CouplingKind::IndependentProduct: return "independent";
        case CouplingKind::AnalyticGaussianJoint: return "gaussian_joint";
        case CouplingKind::FiniteSupport: return "finite_support";
        case CouplingKind::Masked: return "masked";
        case CouplingKind::GeneratorInduced: return "generator_induced";
    }
    return "unknown";
}

/// Joint law of (x0, xT). Every draw that produces clean points x0 is
/// counted; sample_corrupted() draws from the x_T marginal without producing x0.
class Coupling {
public:
    using CorruptedFn = std::function<Mat(Eigen::Index, Rng&)>;
    using GeneratorFn = std::function<Mat(const Mat&, Rng&)>;

    /// x0 ~ target mixture, x_T ~ source Gaussian, independently.
    static Coupling independent(MixtureSpec target, GaussianSpec source) {
        Coupling c(CouplingKind::IndependentProduct, static_cast<int>(source.mean.size()));
        if (target.means.empty() || target.means.front().size() != source.mean.size())
            throw std::invalid_argument("independent coupling: dimension mismatch");
        c.target_ = std::move(target);
        c.source_ = std::move(source);
        return c;
    }

    static Coupling gaussian_joint(Vec mu0, Vec muT, Mat s00, Mat sTT, Mat s0T) {
        const Eigen::Index d = mu0.size();
        if (muT.size() != d || s00.rows() != d || s00.cols() != d || sTT.rows() != d || sTT.cols() != d ||
            s0T.rows() != d || s0T.cols() != d)
            throw std::invalid_argument("gaussian_joint coupling: block shapes disagree");
        Coupling c(CouplingKind::AnalyticGaussianJoint, static_cast<int>(d));
        Mat joint(2 * d, 2 * d);
        joint << s00, s0T, s0T.transpose(), sTT;
        c.joint_factor_ = detail::psd_factor(joint);
        c.mu0_ = std::move(mu0);
        c.muT_ = std::move(muT);
        c.s00_ = std::move(s00);
        c.sTT_ = std::move(sTT);
        c.s0T_ = std::move(s0T);
        c.marginal_factor_ = detail::psd_factor(c.sTT_);
        return c;
    }

    static Coupling finite_support(std::vector<Atom> atoms) {
        if (atoms.empty()) throw std::invalid_argument("finite_support coupling: no atoms");
        const Eigen::Index d = atoms.front().x0.size();
        double total = 0.0;
        for (const auto& a : atoms) {
            if (a.x0.size() != d || a.xT.size() != d)
                throw std::invalid_argument("finite_support coupling: atom dimension mismatch");
            if (!(a.weight > 0.0)) throw std::invalid_argument("finite_support coupling: weights must be positive");
            total += a.weight;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            std::ostringstream os;
            os << "finite_support coupling: weights sum to " << total << ", expected 1";
            throw std::invalid_argument(os.str());
        }
        Coupling c(CouplingKind::FiniteSupport, static_cast<int>(d));
        std::vector<double> w;
        for (const auto& a : atoms) w.push_back(a.weight);
        c.cum_weights_ = detail::cumulative(w);
        c.atoms_ = std::move(atoms);
        return c;
    }

    static Coupling masked(MaskedSpec spec) {
        if (spec.modes < 2) throw std::invalid_argument("masked coupling: need at least 2 modes");
        if (!(spec.offset > 0.0) || !(spec.spread >= 0.0))
            throw std::invalid_argument("masked coupling: offset must be positive and spread non-negative");
        Coupling c(CouplingKind::Masked, 2);
        c.masked_ = spec;
        return c;
    }

    /// x_T from `corrupted`, x0 = generator(x_T).
    static Coupling generator_induced(GeneratorFn generator, CorruptedFn corrupted, int dim) {
        Coupling c(CouplingKind::GeneratorInduced, dim);
        c.generator_ = std::move(generator);
        c.corrupted_ = std::move(corrupted);
        return c;
    }

    CouplingKind kind() const { return kind_; }
    int dim() const { return dim_; }
    long clean_draws() const { return *clean_draws_; }

    const std::vector<Atom>& atoms() const { return atoms_; }
    const MixtureSpec& target() const { return target_; }
    const GaussianSpec& source() const { return source_; }
    const MaskedSpec& masked_spec() const { return masked_; }
    const Vec& mu0() const { return mu0_; }
    const Vec& muT() const { return muT_; }
    const Mat& s00() const { return s00_; }
    const Mat& sTT() const { return sTT_; }
    const Mat& s0T() const { return s0T_; }

    /// n pairs as (x0 batch, xT batch).
    std::pair<Mat, Mat> sample(Eigen::Index n, Rng& rng) const {
        *clean_draws_ += n;
        switch (kind_) {
            case CouplingKind::IndependentProduct: {
                Mat x0 = sample_mixture(target_, n, rng);
                Mat xT = sample_gaussian(source_, n, rng);
                return {std::move(x0), std::move(xT)};
            }
            case CouplingKind::AnalyticGaussianJoint: {
                Mat z = joint_factor_ * standard_normal(2 * dim_, n, rng);
                Mat x0 = z.topRows(dim_);
                Mat xT = z.bottomRows(dim_);
                x0.colwise() += mu0_;
                xT.colwise() += muT_;
                return {std::move(x0), std::move(xT)};
            }
            case CouplingKind::FiniteSupport: {
                Mat x0(dim_, n), xT(dim_, n);
                for (Eigen::Index j = 0; j < n; ++j) {
                    const Atom& a = atoms_[detail::draw_index(cum_weights_, rng)];
                    x0.col(j) = a.x0;
                    xT.col(j) = a.xT;
                }
                return {std::move(x0), std::move(xT)};
            }
            case CouplingKind::Masked: {
                std::normal_distribution<double> n01(0.0, 1.0);
                std::uniform_int_distribution<int> mode(0, masked_.modes - 1);
                const double gap = 2.0 * masked_.offset / (masked_.modes - 1);
                Mat x0(2, n), xT(2, n);
                for (Eigen::Index j = 0; j < n; ++j) {
                    const double u = n01(rng);
                    const double center = -masked_.offset + gap * mode(rng);
                    x0(0, j) = u;
                    x0(1, j) = center + masked_.spread * n01(rng);
                    xT(0, j) = u;
                    xT(1, j) = 0.0;
                }
                return {std::move(x0), std::move(xT)};
            }
            case CouplingKind::GeneratorInduced: {
                Mat xT = corrupted_(n, rng);
                Mat x0 = generator_(xT, rng);
                return {std::move(x0), std::move(xT)};
            }
        }
        throw std::logic_error("unreachable coupling kind");
    }

    /// n draws from the x_T marginal. Never produces clean points.
    Mat sample_corrupted(Eigen::Index n, Rng& rng) const {
        switch (kind_) {
            case CouplingKind::IndependentProduct: return sample_gaussian(source_, n, rng);
            case CouplingKind::AnalyticGaussianJoint: {
                Mat xT = marginal_factor_ * standard_normal(dim_, n, rng);
                xT.colwise() += muT_;
                return xT;
            }
            case CouplingKind::FiniteSupport: {
                Mat xT(dim_, n);
                for (Eigen::Index j = 0; j < n; ++j) xT.col(j) = atoms_[detail::draw_index(cum_weights_, rng)].xT;
                return xT;
            }
            case CouplingKind::Masked: {
                std::normal_distribution<double> n01(0.0, 1.0);
                Mat xT = Mat::Zero(2, n);
                for (Eigen::Index j = 0; j < n; ++j) xT(0, j) = n01(rng);
                return xT;
            }
            case CouplingKind::GeneratorInduced: return corrupted_(n, rng);
        }
        throw std::logic_error("unreachable coupling kind");
    }

private:
    Coupling(CouplingKind kind, int dim) : kind_(kind), dim_(dim), clean_draws_(std::make_shared<long>(0)) {}

    CouplingKind kind_;
    int dim_;
    std::shared_ptr<long> clean_draws_;

    MixtureSpec target_;
    GaussianSpec source_;
    Vec mu0_, muT_;
    Mat s00_, sTT_, s0T_;
    Mat joint_factor_, marginal_factor_;
    std::vector<Atom> atoms_;
    std::vector<double> cum_weights_;
    MaskedSpec masked_;
    GeneratorFn generator_;
    CorruptedFn corrupted_;
};

/// Read-only access to the x_T marginal of a coupling. This is the only data
/// access distillation receives.
class CorruptedSampler {
public:
    explicit CorruptedSampler(const Coupling& coupling) : coupling_(&coupling) {}

    int dim() const { return coupling_->dim(); }
    Mat sample(Eigen::Index n, Rng& rng) const { return coupling_->sample_corrupted(n, rng); }

private:
    const Coupling* coupling_;
};

// ---------------------------------------------------------------------------
// Time weighting lambda(t)

struct Weighting {
    enum class Kind { One, Table };
    Kind kind = Kind::One;
    /// Piecewise-linear table (t_i, lambda_i), t ascending; clamped outside.
    std::vector<std::pair<double, double>> table;
    double scale = 1.0;

    static Weighting one() { return {}; }

    static Weighting constant(double value) {
        Weighting w;
        w.scale = value;
        return w;
    }

    static Weighting from_table(std::vector<std::pair<double, double>> points) {
        if (points.empty()) throw std::invalid_argument("weighting table is empty");
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (!(points[i].second > 0.0)) throw std::invalid_argument("weighting values must be positive");
            if (i > 0 && !(points[i].first > points[i - 1].first))
                throw std::invalid_argument("weighting table times must be strictly increasing");
        }
        Weighting w;
        w.kind = Kind::Table;
        w.table = std::move(points);
        return w;
    }

    double operator()(double t) const {
        if (kind == Kind::One) return scale;
        if (t <= table.front().first) return scale * table.front().second;
        if (t >= table.back().first) return scale * table.back().second;
        const auto it = std::upper_bound(table.begin(), table.end(), t,
                                         [](double v, const auto& p) { return v < p.first; });
        const auto& hi = *it;
        const auto& lo = *(it - 1);
        const double u = (t - lo.first) / (hi.first - lo.first);
        return scale * (lo.second + u * (hi.second - lo.second));
    }
};

// ---------------------------------------------------------------------------
// Bridge-matching loss and teacher training

/// Training batch of bridge samples, one per column.
struct BridgeBatch {
    Mat x0;
    Mat xT;
    Vec t;
    Mat xt;
    Mat noise;
};

inline Vec sample_times(const Schedule& s, Eigen::Index n, Rng& rng) {
    return uniform_vector(n, s.t_min(), s.horizon(), rng);
}

inline BridgeBatch make_bridge_batch(const Schedule& s, Mat x0, Mat xT, Rng& rng) {
    BridgeBatch b;
    b.t = sample_times(s, x0.cols(), rng);
    b.xt = sample_bridge_batch(s, x0, xT, b.t, rng, &b.noise);
    b.x0 = std::move(x0);
    b.xT = std::move(xT);
    return b;
}

struct LossAndGrad {
    double loss = 0.0;
    Vec grad;
};

/// Mean of lambda(t) ||x0_hat - x0||^2 over the batch, with parameter gradient.
/// x_T is fed to the network only when it is conditional.
inline LossAndGrad bm_loss(const X0Predictor& net, const BridgeBatch& batch, const Weighting& lambda) {
    X0Predictor::Tape tape;
    const Mat pred = net.predict(batch.xt, batch.t, net.conditional() ? &batch.xT : nullptr, nullptr, tape);
    const Eigen::Index n = batch.xt.cols();
    Vec w(n);
    for (Eigen::Index j = 0; j < n; ++j) w(j) = lambda(batch.t(j));
    const Mat diff = pred - batch.x0;
    LossAndGrad out;
    out.loss = (diff.colwise().squaredNorm().transpose().array() * w.array()).sum() / static_cast<double>(n);
    if (!std::isfinite(out.loss)) throw NumericalError("bm_loss: non-finite loss");
    const Mat upstream = diff * (2.0 / static_cast<double>(n) * w).asDiagonal();
    out.grad = Vec::Zero(net.net().num_params());
    net.backward(tape, upstream, &out.grad);
    return out;
}

struct TeacherConfig {
    bool conditional = false;
    Weighting lambda = Weighting::one();
    int batch_size = 256;
    int iterations = 20000;
    AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.999};
    std::vector<int> hidden{64, 64, 64};
    Activation activation = Activation::SiLU;
    EmbeddingMethod embedding = EmbeddingMethod::Sinusoidal;
    int frequencies = 8;
};

struct TrainedTeacher {
    X0Predictor net;
    std::vector<double> losses;
};

inline PredictorLayout teacher_layout(const TeacherConfig& cfg, int dim, double horizon) {
    PredictorLayout l;
    l.dim = dim;
    l.conditional = cfg.conditional;
    l.embedding = TimeEmbedding{cfg.embedding, cfg.frequencies, horizon};
    l.hidden = cfg.hidden;
    l.activation = cfg.activation;
    return l;
}

/// Fits x0_hat on bridge samples of `coupling`; returns the EMA network.
/// `init_rng` seeds the weights and `data_rng` drives all sampling.
inline TrainedTeacher train_teacher(const Coupling& coupling, const Schedule& s, const TeacherConfig& cfg,
                                    Rng& init_rng, Rng& data_rng) {
    X0Predictor net(teacher_layout(cfg, coupling.dim(), s.horizon()), init_rng);
    OptimizerState opt(cfg.adam, net.net().params());
    TrainedTeacher out;
    out.losses.reserve(static_cast<std::size_t>(cfg.iterations));
    for (int it = 0; it < cfg.iterations; ++it) {
        auto [x0, xT] = coupling.sample(cfg.batch_size, data_rng);
        const BridgeBatch batch = make_bridge_batch(s, std::move(x0), std::move(xT), data_rng);
        LossAndGrad lg = bm_loss(net, batch, cfg.lambda);
        if (lg.loss > 1e6) {
            std::ostringstream os;
            os << "teacher training diverged at iteration " << it << " (loss " << lg.loss << ")";
            throw NumericalError(os.str());
        }
        out.losses.push_back(lg.loss);
        opt.step(net.net(), lg.grad);
    }
    net.net().params() = opt.ema();
    out.net = std::move(net);
    return out;
}

}  // namespace ibmd

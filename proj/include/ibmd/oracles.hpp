#pragma once

// Exact minimizers of the bridge-matching regression for couplings where they
// are available in closed form, and Monte-Carlo checkers built on them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "ibmd/bridges.hpp"
#include "ibmd/matching.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/types.hpp"

namespace ibmd {

/// Affine map x -> K x + k0.
struct AffineMap {
    Mat K;
    Vec k0;

    Mat apply(const Mat& x) const {
        Mat out = K * x;
        out.colwise() += k0;
        return out;
    }
};

namespace detail {

inline Mat solve_spd(const Mat& A, const Mat& B, const char* what) {
    Eigen::LDLT<Mat> ldlt(A);
    const double maxd = ldlt.vectorD().cwiseAbs().maxCoeff();
    const double mind = ldlt.vectorD().cwiseAbs().minCoeff();
    if (ldlt.info() != Eigen::Success || !(mind > 1e-14 * std::max(1.0, maxd))) {
        std::ostringstream os;
        os << what << ": singular conditioning covariance (condition number ~ "
           << (mind > 0.0 ? maxd / mind : std::numeric_limits<double>::infinity()) << ")";
        throw std::domain_error(os.str());
    }
    return ldlt.solve(B);
}

}  // namespace detail

/// (x0, xT) jointly Gaussian; x_t | x0, xT Gaussian, so every conditional
/// expectation is affine.
class GaussianJointOracle {
public:
    GaussianJointOracle(const Coupling& c, Schedule s)
        : mu0_(c.mu0()), muT_(c.muT()), s00_(c.s00()), sTT_(c.sTT()), s0T_(c.s0T()), s_(std::move(s)) {
        if (c.kind() != CouplingKind::AnalyticGaussianJoint)
            throw std::invalid_argument("GaussianJointOracle needs an analytic Gaussian coupling");
    }

    int dim() const { return static_cast<int>(mu0_.size()); }

    /// E[x0 | x_t] = K x_t + k0.
    AffineMap unconditional_map(double t) const {
        const BridgeCoeffs c = bridge_coeffs(s_, t);
        const Mat cov_x0_xt = c.b * s00_ + c.a * s0T_;
        const Mat var_xt = c.a * c.a * sTT_ + c.b * c.b * s00_ + c.a * c.b * (s0T_ + s0T_.transpose()) +
                           c.c2 * Mat::Identity(dim(), dim());
        const Vec mean_xt = c.a * muT_ + c.b * mu0_;
        AffineMap m;
        m.K = detail::solve_spd(var_xt, cov_x0_xt.transpose(), "GaussianJointOracle").transpose();
        m.k0 = mu0_ - m.K * mean_xt;
        return m;
    }

    /// Cov[x0 | x_t].
    Mat unconditional_covariance(double t) const {
        const BridgeCoeffs c = bridge_coeffs(s_, t);
        const Mat cov_x0_xt = c.b * s00_ + c.a * s0T_;
        const Mat var_xt = c.a * c.a * sTT_ + c.b * c.b * s00_ + c.a * c.b * (s0T_ + s0T_.transpose()) +
                           c.c2 * Mat::Identity(dim(), dim());
        return s00_ - cov_x0_xt * detail::solve_spd(var_xt, cov_x0_xt.transpose(), "GaussianJointOracle");
    }

    /// Mean and covariance of x0 | x_T.
    std::pair<AffineMap, Mat> given_xT() const {
        AffineMap m;
        m.K = detail::solve_spd(sTT_, s0T_.transpose(), "GaussianJointOracle").transpose();
        m.k0 = mu0_ - m.K * muT_;
        return {m, s00_ - m.K * s0T_.transpose()};
    }

    /// E[x0 | x_t, x_T] for one column.
    Vec conditional_mean(const Vec& xt, double t, const Vec& xT) const {
        const auto [mT, S] = given_xT();
        const Vec m = mT.K * xT + mT.k0;
        const BridgeCoeffs c = bridge_coeffs(s_, t);
        if (c.b == 0.0) return m;
        const Mat A = c.b * c.b * S + c.c2 * Mat::Identity(dim(), dim());
        const Vec y = xt - c.a * xT - c.b * m;
        return m + c.b * S * detail::solve_spd(A, y, "GaussianJointOracle");
    }

    Mat posterior_mean(const Mat& xt, const Vec& t, const Mat* xT = nullptr) const {
        Mat out(xt.rows(), xt.cols());
        if (xT) {
            for (Eigen::Index j = 0; j < xt.cols(); ++j) out.col(j) = conditional_mean(xt.col(j), t(j), xT->col(j));
            return out;
        }
        for (Eigen::Index j = 0; j < xt.cols(); ++j) {
            const AffineMap m = unconditional_map(t(j));
            out.col(j) = m.K * xt.col(j) + m.k0;
        }
        return out;
    }

    const Schedule& schedule() const { return s_; }

private:
    Vec mu0_, muT_;
    Mat s00_, sTT_, s0T_;
    Schedule s_;
};

/// Exact posterior over the atoms of a finite coupling:
/// r_i(x_t) proportional to w_i N(x_t | a_t xT_i + b_t x0_i, c_t^2 I).
class FiniteOracle {
public:
    FiniteOracle(std::vector<Atom> atoms, Schedule s) : atoms_(std::move(atoms)), s_(std::move(s)) {
        if (atoms_.empty()) throw std::invalid_argument("FiniteOracle: no atoms");
    }
    FiniteOracle(const Coupling& c, Schedule s) : FiniteOracle(c.atoms(), std::move(s)) {
        if (c.kind() != CouplingKind::FiniteSupport)
            throw std::invalid_argument("FiniteOracle needs a finite-support coupling");
    }

    int dim() const { return static_cast<int>(atoms_.front().x0.size()); }
    const std::vector<Atom>& atoms() const { return atoms_; }

    /// Responsibilities of each atom given x_t (and, when non-null, x_T).
    /// Atoms whose x_T differs from the given one get zero weight.
    Vec responsibilities(const Vec& xt, double t, const Vec* xT = nullptr) const {
        const BridgeCoeffs c = bridge_coeffs(s_, t);
        const std::size_t m = atoms_.size();
        Vec logw = Vec::Constant(static_cast<Eigen::Index>(m), -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < m; ++i) {
            const Atom& a = atoms_[i];
            if (xT && !same_point(a.xT, *xT)) continue;
            const Vec mean = c.a * a.xT + c.b * a.x0;
            if (c.c2 > 0.0) {
                logw(static_cast<Eigen::Index>(i)) = std::log(a.weight) - (xt - mean).squaredNorm() / (2.0 * c.c2);
            } else if (same_point(mean, xt)) {
                logw(static_cast<Eigen::Index>(i)) = std::log(a.weight);
            }
        }
        const double mx = logw.maxCoeff();
        if (!std::isfinite(mx)) throw std::domain_error("FiniteOracle: no atom is compatible with the conditioning");
        Vec r = (logw.array() - mx).exp().matrix();
        return r / r.sum();
    }

    Vec posterior_mean(const Vec& xt, double t, const Vec* xT = nullptr) const {
        const Vec r = responsibilities(xt, t, xT);
        Vec out = Vec::Zero(dim());
        for (std::size_t i = 0; i < atoms_.size(); ++i) out += r(static_cast<Eigen::Index>(i)) * atoms_[i].x0;
        return out;
    }

    /// E[||x0 - E[x0 | .]||^2 | .], the minimal regression error at this point.
    double posterior_variance(const Vec& xt, double t, const Vec* xT = nullptr) const {
        const Vec r = responsibilities(xt, t, xT);
        const Vec m = posterior_mean(xt, t, xT);
        double v = 0.0;
        for (std::size_t i = 0; i < atoms_.size(); ++i)
            v += r(static_cast<Eigen::Index>(i)) * (atoms_[i].x0 - m).squaredNorm();
        return v;
    }

    Mat posterior_mean(const Mat& xt, const Vec& t, const Mat* xT = nullptr) const {
        Mat out(xt.rows(), xt.cols());
        for (Eigen::Index j = 0; j < xt.cols(); ++j) {
            if (xT) {
                const Vec cond = xT->col(j);
                out.col(j) = posterior_mean(Vec(xt.col(j)), t(j), &cond);
            } else {
                out.col(j) = posterior_mean(Vec(xt.col(j)), t(j));
            }
        }
        return out;
    }

    /// Exact draws from p(x0 | x_T) (conditional brute force over atoms).
    Mat sample_given_xT(const Vec& xT, Eigen::Index n, Rng& rng) const {
        std::vector<double> w;
        std::vector<const Atom*> pool;
        for (const Atom& a : atoms_)
            if (same_point(a.xT, xT)) {
                w.push_back(a.weight);
                pool.push_back(&a);
            }
        if (pool.empty()) throw std::domain_error("FiniteOracle: no atom has this x_T");
        const auto cum = detail::cumulative(w);
        Mat out(dim(), n);
        for (Eigen::Index j = 0; j < n; ++j) out.col(j) = pool[detail::draw_index(cum, rng)]->x0;
        return out;
    }

    const Schedule& schedule() const { return s_; }

private:
    static bool same_point(const Vec& a, const Vec& b) {
        return (a - b).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff());
    }

    std::vector<Atom> atoms_;
    Schedule s_;
};

// ---------------------------------------------------------------------------
// Drift helpers

/// Score-parameterized drift v(x_t, t, x_T) -> batch.
using DriftFn = std::function<Mat(const Mat&, const Vec&, const Mat&)>;

/// v = -(x_t - alpha_t x0_hat) / sigma_t^2 from a deterministic x0 predictor.
inline DriftFn drift_from_x0(const Schedule& s, std::function<Mat(const Mat&, const Vec&, const Mat&)> x0hat) {
    return [s, x0hat = std::move(x0hat)](const Mat& xt, const Vec& t, const Mat& xT) {
        return v_from_x0_batch(s, x0hat(xt, t, xT), xt, t);
    };
}

/// Full reverse-time SDE drift f(t) x - g^2(t) v.
inline DriftFn reverse_sde_drift(const Schedule& s, DriftFn v) {
    return [s, v = std::move(v)](const Mat& xt, const Vec& t, const Mat& xT) {
        Mat out = v(xt, t, xT);
        for (Eigen::Index j = 0; j < xt.cols(); ++j) out.col(j) = s.f(t(j)) * xt.col(j) - s.g2(t(j)) * out.col(j);
        return out;
    };
}

// ---------------------------------------------------------------------------
// Inverse-problem identity check

struct IdentityReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double gap = 0.0;
    double stderr_gap = 0.0;
    double lhs_stderr = 0.0;
    double rhs_stderr = 0.0;
    long n_mc = 0;
    std::uint64_t seed = 0;
};

namespace detail {

struct RunningMoments {
    double sum = 0.0;
    double sum_sq = 0.0;
    long n = 0;

    void add(double x) {
        sum += x;
        sum_sq += x * x;
        ++n;
    }
    double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
    double stderr_of_mean() const {
        if (n < 2) return 0.0;
        const double m = mean();
        const double var = std::max(0.0, (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
        return std::sqrt(var / static_cast<double>(n));
    }
};

}  // namespace detail

/// Estimates both sides of the inverse-problem reformulation on shared samples
/// (x0, xT) ~ coupling, t ~ U[t_min, T], x_t ~ q(x_t | x0, xT):
///   lhs = E lambda ||v - v*||^2,
///   rhs = E lambda ||v* - s||^2 - E lambda ||v - s||^2,
/// where s = grad log q(x_t | x0) and v is the exact posterior drift, i.e. the
/// minimizer of the inner regression. `oracle` must expose
/// posterior_mean(Mat x_t, Vec t, const Mat* x_T).
template <class Oracle>
IdentityReport theorem_identity(const Coupling& coupling, const Oracle& oracle, const DriftFn& teacher_v,
                                const Schedule& s, const Weighting& lambda, long n_mc, Rng& rng,
                                bool conditional = false, std::uint64_t seed_tag = 0) {
    detail::RunningMoments lhs, rhs, gap;
    constexpr long kChunk = 8192;
    for (long done = 0; done < n_mc; done += kChunk) {
        const Eigen::Index n = static_cast<Eigen::Index>(std::min(kChunk, n_mc - done));
        auto [x0, xT] = coupling.sample(n, rng);
        const Vec t = sample_times(s, n, rng);
        const Mat xt = sample_bridge_batch(s, x0, xT, t, rng);
        const Mat post = oracle.posterior_mean(xt, t, conditional ? &xT : nullptr);
        const Mat v = v_from_x0_batch(s, post, xt, t);
        const Mat vstar = teacher_v(xt, t, xT);
        const Mat target = v_from_x0_batch(s, x0, xt, t);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double w = lambda(t(j));
            const double l = w * (v.col(j) - vstar.col(j)).squaredNorm();
            const double r = w * ((vstar.col(j) - target.col(j)).squaredNorm() - (v.col(j) - target.col(j)).squaredNorm());
            lhs.add(l);
            rhs.add(r);
            gap.add(l - r);
        }
    }
    IdentityReport rep;
    rep.lhs = lhs.mean();
    rep.rhs = rhs.mean();
    rep.gap = gap.mean();
    rep.stderr_gap = gap.stderr_of_mean();
    rep.lhs_stderr = lhs.stderr_of_mean();
    rep.rhs_stderr = rhs.stderr_of_mean();
    rep.n_mc = n_mc;
    rep.seed = seed_tag;
    return rep;
}

// ---------------------------------------------------------------------------
// Path-measure KL between two reverse diffusions with shared start law

struct PathKlEstimate {
    double value = 0.0;
    double stderr_value = 0.0;
    long n_mc = 0;
};

/// Draws (x_t, t, x_T) from the marginals of the process the expectation is
/// taken under.
using MarginalSampler = std::function<void(Eigen::Index, Rng&, Mat& xt, Vec& t, Mat& xT)>;

/// Mixture-of-bridges marginal of a coupling with t ~ U[max(t_min, t_lo), T].
inline MarginalSampler bridge_marginal_sampler(const Schedule& s,
                                               std::function<std::pair<Mat, Mat>(Eigen::Index, Rng&)> pairs,
                                               double t_lo = 0.0) {
    if (!(t_lo < s.horizon())) throw std::invalid_argument("bridge_marginal_sampler: t_lo must be below T");
    return [s, pairs = std::move(pairs), t_lo](Eigen::Index n, Rng& rng, Mat& xt, Vec& t, Mat& xT) {
        auto [x0, xT_] = pairs(n, rng);
        t = t_lo > s.t_min() ? uniform_vector(n, t_lo, s.horizon(), rng) : sample_times(s, n, rng);
        xt = sample_bridge_batch(s, x0, xT_, t, rng);
        xT = std::move(xT_);
    };
}

/// KL(D1 || D2) = E_{t, p_t}[ ||u1 - u2||^2 / (2 g^2(t)) ] for full drifts
/// u1, u2 and t uniform on [t_min, T].
inline PathKlEstimate path_kl_estimate(const DriftFn& drift1, const DriftFn& drift2, const MarginalSampler& marginal,
                                       const Schedule& s, long n_mc, Rng& rng) {
    detail::RunningMoments m;
    constexpr long kChunk = 8192;
    for (long done = 0; done < n_mc; done += kChunk) {
        const Eigen::Index n = static_cast<Eigen::Index>(std::min(kChunk, n_mc - done));
        Mat xt, xT;
        Vec t;
        marginal(n, rng, xt, t, xT);
        const Mat d = drift1(xt, t, xT) - drift2(xt, t, xT);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double g2 = s.g2(t(j));
            if (!(g2 > 0.0)) {
                std::ostringstream os;
                os << "path_kl_estimate: g^2(t) = 0 at excluded time t = " << t(j);
                throw std::domain_error(os.str());
            }
            m.add(d.col(j).squaredNorm() / (2.0 * g2));
        }
    }
    return {m.mean(), m.stderr_of_mean(), n_mc};
}

}  // namespace ibmd

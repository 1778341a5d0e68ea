#pragma once

// Sampling from Gaussian diffusion bridges and integrating the reverse-time
// process of a bridge-matching model.

#include <functional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "ibmd/netcore.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/types.hpp"

namespace ibmd {

/// x0 prediction callable: (x_t batch, per-column times, x_T batch, rng) -> x0_hat batch.
/// Stochastic predictors (generators) draw their noise from the rng.
using PredictorFn = std::function<Mat(const Mat&, const Vec&, const Mat&, Rng&)>;

inline PredictorFn as_predictor_fn(const X0Predictor& net) {
    return [&net](const Mat& xt, const Vec& t, const Mat& xT, Rng&) {
        return net.predict(xt, t, net.conditional() ? &xT : nullptr);
    };
}

namespace detail {

inline void check_score_time(const Schedule& s, double t, const char* what) {
    if (!(t >= s.t_min() && t <= s.horizon())) {
        std::ostringstream os;
        os << what << ": time " << t << " outside [t_min = " << s.t_min() << ", " << s.horizon() << "]";
        throw std::domain_error(os.str());
    }
}

inline void check_same_shape(const Mat& a, const Mat& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        std::ostringstream os;
        os << what << ": dimension mismatch (" << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
           << b.cols() << ")";
        throw std::invalid_argument(os.str());
    }
}

}  // namespace detail

/// One draw x_t = a_t x_T + b_t x_0 + c_t eps, eps ~ N(0, I).
inline Vec sample_bridge(const Schedule& s, const Vec& x0, const Vec& xT, double t, Rng& rng) {
    detail::check_same_shape(x0, xT, "sample_bridge");
    const BridgeCoeffs c = bridge_coeffs(s, t);
    Vec out = c.a * xT + c.b * x0;
    if (c.c2 > 0.0) out += c.c() * standard_normal(x0.size(), 1, rng).col(0);
    return out;
}

/// Column-wise bridge draws with per-column times. The standard-normal noise
/// used is written to `noise` when non-null (needed to differentiate x_t
/// with respect to x_0).
inline Mat sample_bridge_batch(const Schedule& s, const Mat& x0, const Mat& xT, const Vec& t, Rng& rng,
                               Mat* noise = nullptr) {
    detail::check_same_shape(x0, xT, "sample_bridge_batch");
    if (t.size() != x0.cols()) throw std::invalid_argument("sample_bridge_batch: one time per column required");
    const Mat eps = standard_normal(x0.rows(), x0.cols(), rng);
    Mat out(x0.rows(), x0.cols());
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        const BridgeCoeffs c = bridge_coeffs(s, t(j));
        out.col(j) = c.a * xT.col(j) + c.b * x0.col(j) + c.c() * eps.col(j);
    }
    if (noise) *noise = eps;
    return out;
}

/// Regression target grad_{x_t} log q(x_t | x_0) = -(x_t - alpha_t x_0) / sigma_t^2.
inline Vec score_target(const Schedule& s, const Vec& x0, const Vec& xt, double t) {
    detail::check_score_time(s, t, "score_target");
    detail::check_same_shape(x0, xt, "score_target");
    return -(xt - s.alpha(t) * x0) / s.sigma2(t);
}

/// Drift parameterization v = -(x_t - alpha_t x0_hat) / sigma_t^2.
inline Vec v_from_x0(const Schedule& s, const Vec& x0hat, const Vec& xt, double t) {
    detail::check_score_time(s, t, "v_from_x0");
    detail::check_same_shape(x0hat, xt, "v_from_x0");
    return -(xt - s.alpha(t) * x0hat) / s.sigma2(t);
}

/// Inverse of v_from_x0: x0_hat = (sigma_t^2 v + x_t) / alpha_t.
inline Vec x0_from_v(const Schedule& s, const Vec& v, const Vec& xt, double t) {
    detail::check_score_time(s, t, "x0_from_v");
    detail::check_same_shape(v, xt, "x0_from_v");
    return (s.sigma2(t) * v + xt) / s.alpha(t);
}

/// Column-wise v_from_x0 with per-column times.
inline Mat v_from_x0_batch(const Schedule& s, const Mat& x0hat, const Mat& xt, const Vec& t) {
    detail::check_same_shape(x0hat, xt, "v_from_x0_batch");
    Mat v(xt.rows(), xt.cols());
    for (Eigen::Index j = 0; j < xt.cols(); ++j) {
        detail::check_score_time(s, t(j), "v_from_x0_batch");
        v.col(j) = -(xt.col(j) - s.alpha(t(j)) * x0hat.col(j)) / s.sigma2(t(j));
    }
    return v;
}

enum class ReverseMode { SDE, Posterior };

struct ReverseTrajectory {
    /// Decreasing grid, times.front() = T, times.back() = 0.
    std::vector<double> times;
    /// states[k] is the D x N batch at times[k].
    std::vector<Mat> states;
    /// Number of predictor calls (each call evaluates the whole batch).
    int nfe = 0;

    const Mat& terminal() const { return states.back(); }
};

inline std::vector<double> uniform_grid(double horizon, int steps) {
    std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
    for (int k = 0; k <= steps; ++k) grid[static_cast<std::size_t>(k)] = horizon * k / steps;
    grid.back() = horizon;
    return grid;
}

/// Integrates from x_T at time T down to time 0 on a uniform grid.
///
/// SDE mode: Euler-Maruyama on dx = {f(t) x - g^2(t) v(x, t)} dt + g(t) dw
/// in reverse time, with v from the predictor's x0_hat. The last interval
/// [0, t_1] is closed by the bridge posterior mean, i.e. x_0 = x0_hat(x_{t_1}).
///
/// Posterior mode: x0_hat = predictor(x_{t_k}, t_k), then
/// x_{t_{k-1}} ~ q(x_{t_{k-1}} | x0_hat, x_{t_k}). The final step is
/// deterministic because the interval law pins x_0.
inline ReverseTrajectory simulate_reverse(const Schedule& s, const PredictorFn& predictor, const Mat& xT,
                                          int steps, ReverseMode mode, Rng& rng) {
    if (steps < 1) throw std::invalid_argument("simulate_reverse: steps must be >= 1");
    const std::vector<double> grid = uniform_grid(s.horizon(), steps);
    const Eigen::Index n = xT.cols();
    ReverseTrajectory traj;
    traj.times.reserve(grid.size());
    traj.states.reserve(grid.size());
    traj.times.push_back(grid.back());
    traj.states.push_back(xT);
    Mat x = xT;
    for (int k = steps; k >= 1; --k) {
        const double t_hi = grid[static_cast<std::size_t>(k)];
        const double t_lo = grid[static_cast<std::size_t>(k - 1)];
        const Vec tv = Vec::Constant(n, t_hi);
        const Mat x0hat = predictor(x, tv, xT, rng);
        ++traj.nfe;
        if (mode == ReverseMode::Posterior || k == 1) {
            const BridgeCoeffs c = bridge_coeffs_on_interval(s, t_lo, t_hi);
            Mat next = c.a * x + c.b * x0hat;
            if (c.c2 > 0.0) next += c.c() * standard_normal(x.rows(), n, rng);
            x = std::move(next);
        } else {
            const double dt = t_hi - t_lo;
            const double a = s.alpha(t_hi), s2 = s.sigma2(t_hi);
            const Mat v = -(x - a * x0hat) / s2;
            const Mat drift = s.f(t_hi) * x - s.g2(t_hi) * v;
            x = x - drift * dt + s.g(t_hi) * std::sqrt(dt) * standard_normal(x.rows(), n, rng);
        }
        if (!x.allFinite()) {
            std::ostringstream os;
            os << "simulate_reverse: non-finite state at step " << (steps - k + 1) << " (t = " << t_lo << ")";
            throw NumericalError(os.str());
        }
        traj.times.push_back(t_lo);
        traj.states.push_back(x);
    }
    return traj;
}

/// CSV with columns traj_id, step, t, x0..x{D-1}; step 0 is time T.
inline void write_trajectories_csv(std::ostream& os, const ReverseTrajectory& traj) {
    if (traj.states.empty()) return;
    const Eigen::Index d = traj.states.front().rows();
    os << "traj_id,step,t";
    for (Eigen::Index i = 0; i < d; ++i) os << ",x" << i;
    os << '\n';
    const Eigen::Index n = traj.states.front().cols();
    os.precision(17);
    for (Eigen::Index j = 0; j < n; ++j)
        for (std::size_t k = 0; k < traj.states.size(); ++k) {
            os << j << ',' << k << ',' << traj.times[k];
            for (Eigen::Index i = 0; i < d; ++i) os << ',' << traj.states[k](i, j);
            os << '\n';
        }
}

}  // namespace ibmd

#pragma once

// Linear-drift prior processes dx = f(t) x dt + g(t) dw with Gaussian transition
// kernel q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I), and the closed-form
// coefficients of the pinned (bridge) process derived from them.

#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ibmd {

enum class ScheduleKind { Brownian, VariancePreserving, Custom };

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Brownian: return "brownian";
        case ScheduleKind::VariancePreserving: return "vp";
        case ScheduleKind::Custom: return "custom";
    }
    return "unknown";
}

/// Law of x_t given x_0 (time 0) and x_T (horizon): N(a x_T + b x_0, c2 I).
struct BridgeCoeffs {
    double a = 0.0;
    double b = 0.0;
    double c2 = 0.0;

    double c() const { return std::sqrt(c2); }
};

/// User-supplied curves for ScheduleKind::Custom. alpha must satisfy
/// alpha(0) = 1, sigma2(0) = 0.
struct CustomCurves {
    std::function<double(double)> alpha;
    std::function<double(double)> dlog_alpha;
    std::function<double(double)> sigma2;
    std::function<double(double)> dsigma2;
};

class Schedule {
public:
    /// alpha_t = 1, sigma_t^2 = eps * t, so f = 0 and g^2 = eps.
    static Schedule brownian(double eps = 1.0, double horizon = 1.0) {
        if (!(eps > 0.0)) throw std::invalid_argument("brownian schedule: eps must be > 0");
        Schedule s(ScheduleKind::Brownian, horizon);
        s.eps_ = eps;
        return s;
    }

    /// Variance-preserving prior with linear beta(t) from beta_min to beta_max
    /// across [0, T]; sigma_t^2 = 1 - alpha_t^2 and g^2 = beta(t).
    static Schedule variance_preserving(double beta_min = 0.1, double beta_max = 20.0,
                                        double horizon = 1.0) {
        if (!(beta_min > 0.0) || beta_max < beta_min)
            throw std::invalid_argument("vp schedule: need 0 < beta_min <= beta_max");
        Schedule s(ScheduleKind::VariancePreserving, horizon);
        s.beta_min_ = beta_min;
        s.beta_max_ = beta_max;
        return s;
    }

    static Schedule custom(CustomCurves curves, double horizon) {
        if (!curves.alpha || !curves.dlog_alpha || !curves.sigma2 || !curves.dsigma2)
            throw std::invalid_argument("custom schedule: all four curves are required");
        Schedule s(ScheduleKind::Custom, horizon);
        s.custom_ = std::move(curves);
        return s;
    }

    ScheduleKind kind() const { return kind_; }
    double horizon() const { return horizon_; }
    double eps() const { return eps_; }
    double beta_min() const { return beta_min_; }
    double beta_max() const { return beta_max_; }

    /// Lower end of every stochastic time draw; sigma_0 = 0 makes the
    /// regression target singular at t = 0.
    double t_min() const { return 1e-4 * horizon_; }

    double alpha(double t) const {
        switch (kind_) {
            case ScheduleKind::Brownian: return 1.0;
            case ScheduleKind::VariancePreserving: return std::exp(log_alpha_vp(t));
            case ScheduleKind::Custom: return custom_.alpha(t);
        }
        return 1.0;
    }

    double sigma2(double t) const {
        switch (kind_) {
            case ScheduleKind::Brownian: return eps_ * t;
            case ScheduleKind::VariancePreserving: return -std::expm1(2.0 * log_alpha_vp(t));
            case ScheduleKind::Custom: return custom_.sigma2(t);
        }
        return 0.0;
    }

    double sigma(double t) const { return std::sqrt(sigma2(t)); }

    /// f(t) = d log(alpha_t) / dt.
    double f(double t) const {
        switch (kind_) {
            case ScheduleKind::Brownian: return 0.0;
            case ScheduleKind::VariancePreserving: return -0.5 * beta_vp(t);
            case ScheduleKind::Custom: return custom_.dlog_alpha(t);
        }
        return 0.0;
    }

    double dsigma2(double t) const {
        switch (kind_) {
            case ScheduleKind::Brownian: return eps_;
            case ScheduleKind::VariancePreserving: {
                const double a = alpha(t);
                return a * a * beta_vp(t);
            }
            case ScheduleKind::Custom: return custom_.dsigma2(t);
        }
        return 0.0;
    }

    /// g^2(t) = d sigma_t^2/dt - 2 f(t) sigma_t^2.
    double g2(double t) const { return dsigma2(t) - 2.0 * f(t) * sigma2(t); }
    double g(double t) const { return std::sqrt(std::max(0.0, g2(t))); }

private:
    Schedule(ScheduleKind kind, double horizon) : kind_(kind), horizon_(horizon) {
        if (!(horizon > 0.0)) throw std::invalid_argument("schedule horizon T must be > 0");
    }

    double beta_vp(double t) const { return beta_min_ + (beta_max_ - beta_min_) * t / horizon_; }
    double log_alpha_vp(double t) const {
        return -0.5 * (beta_min_ * t + 0.5 * (beta_max_ - beta_min_) * t * t / horizon_);
    }

    ScheduleKind kind_;
    double horizon_;
    double eps_ = 1.0;
    double beta_min_ = 0.1;
    double beta_max_ = 20.0;
    CustomCurves custom_;
};

namespace detail {

inline void check_time(const Schedule& s, double t, const char* what) {
    if (!(t >= 0.0 && t <= s.horizon())) {
        std::ostringstream os;
        os << what << ": time " << t << " outside [0, " << s.horizon() << "]";
        throw std::domain_error(os.str());
    }
}

/// SNR_late / SNR_early expressed without forming SNR_0 = inf.
inline double snr_ratio(const Schedule& s, double early, double late) {
    const double a_e = s.alpha(early), a_l = s.alpha(late);
    return (a_l * a_l * s.sigma2(early)) / (s.sigma2(late) * a_e * a_e);
}

}  // namespace detail

/// SNR_t = alpha_t^2 / sigma_t^2 on (0, T]. SNR_0 is +inf and is never evaluated.
inline double snr(const Schedule& s, double t) {
    if (!(t > 0.0 && t <= s.horizon())) {
        std::ostringstream os;
        os << "snr: time " << t << " outside (0, " << s.horizon() << "]";
        throw std::domain_error(os.str());
    }
    const double a = s.alpha(t);
    return a * a / s.sigma2(t);
}

/// Coefficients of x_s given x_0 at time 0 and x_t at time t, for 0 <= s <= t.
inline BridgeCoeffs bridge_coeffs_on_interval(const Schedule& s, double early, double late) {
    detail::check_time(s, early, "bridge_coeffs_on_interval");
    detail::check_time(s, late, "bridge_coeffs_on_interval");
    if (early > late) {
        std::ostringstream os;
        os << "bridge_coeffs_on_interval: s = " << early << " > t = " << late;
        throw std::domain_error(os.str());
    }
    if (early == late) return {1.0, 0.0, 0.0};
    if (early == 0.0) return {0.0, 1.0, 0.0};
    const double r = detail::snr_ratio(s, early, late);
    const double a_s = s.alpha(early);
    BridgeCoeffs c;
    c.a = a_s / s.alpha(late) * r;
    c.b = a_s * (1.0 - r);
    c.c2 = std::max(0.0, s.sigma2(early) * (1.0 - r));
    return c;
}

inline BridgeCoeffs bridge_coeffs(const Schedule& s, double t) {
    detail::check_time(s, t, "bridge_coeffs");
    return bridge_coeffs_on_interval(s, t, s.horizon());
}

}  // namespace ibmd

#pragma once

// Two-sample distances and predictor discrepancy diagnostics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "ibmd/types.hpp"

namespace ibmd {

inline constexpr Eigen::Index kMinEnergySamples = 100;

namespace detail {

inline double mean_pairwise_distance(const Mat& a, const Mat& b) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
        const auto bj = b.col(j);
        double col = 0.0;
        for (Eigen::Index i = 0; i < a.cols(); ++i) col += (a.col(i) - bj).norm();
        total += col;
    }
    return total / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
}

}  // namespace detail

/// 2 E||a - b|| - E||a - a'|| - E||b - b'|| with all expectations taken
/// over every ordered pair (V-statistic). Non-negative; exactly 0 for
/// identical sample sets; scales linearly with the data.
inline double energy_distance(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("energy_distance: dimension mismatch");
    if (a.cols() < kMinEnergySamples || b.cols() < kMinEnergySamples) {
        std::ostringstream os;
        os << "energy_distance: need at least " << kMinEnergySamples << " samples per set (got " << a.cols()
           << " and " << b.cols() << ")";
        throw std::invalid_argument(os.str());
    }
    const double ab = detail::mean_pairwise_distance(a, b);
    const double aa = detail::mean_pairwise_distance(a, a);
    const double bb = detail::mean_pairwise_distance(b, b);
    return std::max(0.0, 2.0 * ab - aa - bb);
}

/// Average over `projections` random unit directions of the 1-D Wasserstein-1
/// distance between the projected samples (quantile coupling).
inline double sliced_wasserstein1(const Mat& a, const Mat& b, int projections, Rng& rng) {
    if (a.rows() != b.rows()) throw std::invalid_argument("sliced_wasserstein1: dimension mismatch");
    if (a.cols() == 0 || b.cols() == 0) throw std::invalid_argument("sliced_wasserstein1: empty sample set");
    const Eigen::Index n = std::max(a.cols(), b.cols());
    auto quantiles = [n](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        std::vector<double> q(static_cast<std::size_t>(n));
        for (Eigen::Index k = 0; k < n; ++k) {
            const auto idx = static_cast<std::size_t>((static_cast<double>(k) + 0.5) / n * v.size());
            q[static_cast<std::size_t>(k)] = v[std::min(idx, v.size() - 1)];
        }
        return q;
    };
    double total = 0.0;
    for (int p = 0; p < projections; ++p) {
        Vec dir = standard_normal(a.rows(), 1, rng).col(0);
        dir.normalize();
        const Vec pa = a.transpose() * dir;
        const Vec pb = b.transpose() * dir;
        const auto qa = quantiles(std::vector<double>(pa.data(), pa.data() + pa.size()));
        const auto qb = quantiles(std::vector<double>(pb.data(), pb.data() + pb.size()));
        double w = 0.0;
        for (std::size_t k = 0; k < qa.size(); ++k) w += std::abs(qa[k] - qb[k]);
        total += w / static_cast<double>(qa.size());
    }
    return total / projections;
}

/// Probe points (x_t, t, x_T) shared by both predictors under comparison.
struct ProbeGrid {
    Mat xt;
    Vec t;
    Mat xT;
};

using DeterministicPredictor = std::function<Mat(const Mat&, const Vec&, const Mat&)>;

/// sqrt(mean ||A - B||^2) / sqrt(mean ||A||^2) over the grid.
inline double drift_discrepancy(const DeterministicPredictor& a, const DeterministicPredictor& b,
                                const ProbeGrid& grid) {
    const Mat pa = a(grid.xt, grid.t, grid.xT);
    const Mat pb = b(grid.xt, grid.t, grid.xT);
    const double denom = pa.squaredNorm();
    if (denom == 0.0) return (pa - pb).squaredNorm() == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt((pa - pb).squaredNorm() / denom);
}

struct MetricReport {
    double energy_distance = 0.0;
    double sliced_w1 = 0.0;
    int projections = 0;
    std::vector<double> mean_gap;
    std::vector<double> var_gap;
    double drift_rel_l2 = 0.0;
    int nfe = 0;
};

inline MetricReport compare_samples(const Mat& a, const Mat& b, int projections, Rng& rng) {
    MetricReport r;
    r.energy_distance = energy_distance(a, b);
    r.projections = projections;
    r.sliced_w1 = sliced_wasserstein1(a, b, projections, rng);
    const Vec ma = a.rowwise().mean(), mb = b.rowwise().mean();
    const Vec va = (a.colwise() - ma).rowwise().squaredNorm() / static_cast<double>(a.cols());
    const Vec vb = (b.colwise() - mb).rowwise().squaredNorm() / static_cast<double>(b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        r.mean_gap.push_back(std::abs(ma(i) - mb(i)));
        r.var_gap.push_back(std::abs(va(i) - vb(i)));
    }
    return r;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["energy_distance"] = r.energy_distance;
    j["sliced_w1"] = r.sliced_w1;
    j["projections"] = r.projections;
    j["mean_gap"] = r.mean_gap;
    j["var_gap"] = r.var_gap;
    j["drift_rel_l2"] = r.drift_rel_l2;
    j["nfe"] = r.nfe;
    return j;
}

}  // namespace ibmd

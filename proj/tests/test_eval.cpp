#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "ibmd/eval.hpp"

using namespace ibmd;

TEST(EnergyDistance, IdenticalSetsGiveZero) {
    Rng rng(1);
    const Mat a = standard_normal(2, 300, rng);
    EXPECT_EQ(energy_distance(a, a), 0.0);
}

TEST(EnergyDistance, PermutationInvariant) {
    Rng rng(2);
    const Mat a = standard_normal(2, 200, rng), b = standard_normal(2, 250, rng).array() + 0.5;
    std::vector<Eigen::Index> perm(200);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat p(2, 200);
    for (Eigen::Index j = 0; j < 200; ++j) p.col(j) = a.col(perm[j]);
    EXPECT_NEAR(energy_distance(p, b), energy_distance(a, b), 1e-12);
}

TEST(EnergyDistance, ShiftedGaussiansStableAcrossSeeds) {
    // Closed form for N(0,1) vs N(1,1): 2E|X-Y| - E|X-X'| - E|Y-Y'| with
    // X-Y ~ N(1, 2) and X-X' ~ N(0, 2).
    const double s = std::sqrt(2.0);
    const double e_xy = s * std::sqrt(2.0 / std::numbers::pi) * std::exp(-1.0 / 4.0) + std::erf(1.0 / 2.0);
    const double e_xx = s * std::sqrt(2.0 / std::numbers::pi);
    const double want = 2 * e_xy - 2 * e_xx;
    std::vector<double> vals;
    for (std::uint64_t seed : {10, 11, 12}) {
        Rng rng(seed);
        const int n = 3000;
        const Mat a = standard_normal(1, n, rng);
        const Mat b = standard_normal(1, n, rng).array() + 1.0;
        vals.push_back(energy_distance(a, b));
    }
    for (double v : vals) {
        EXPECT_GT(v, 0.0);
        EXPECT_NEAR(v, want, 0.05 * want);
    }
}

TEST(EnergyDistance, ScalesLinearly) {
    Rng rng(3);
    const Mat a = standard_normal(2, 150, rng), b = standard_normal(2, 150, rng).array() + 0.3;
    EXPECT_NEAR(energy_distance(3.0 * a, 3.0 * b), 3.0 * energy_distance(a, b), 1e-10);
}

TEST(EnergyDistance, RejectsSmallOrMismatched) {
    EXPECT_THROW(energy_distance(Mat::Zero(2, 99), Mat::Zero(2, 200)), std::invalid_argument);
    EXPECT_THROW(energy_distance(Mat::Zero(2, 200), Mat::Zero(3, 200)), std::invalid_argument);
}

TEST(SlicedW1, ZeroForIdenticalAndShiftDetected) {
    Rng rng(4);
    const Mat a = standard_normal(3, 500, rng);
    Rng p1(5);
    EXPECT_EQ(sliced_wasserstein1(a, a, 16, p1), 0.0);
    // A shift by a unit vector u projects to |<u, dir>|, whose mean over
    // uniform directions in 3-D is 1/2.
    Mat b = a;
    b.row(0).array() += 1.0;
    Rng p2(6);
    EXPECT_NEAR(sliced_wasserstein1(a, b, 4000, p2), 0.5, 0.02);
    EXPECT_THROW(sliced_wasserstein1(a, Mat::Zero(2, 5), 4, p2), std::invalid_argument);
}

TEST(DriftDiscrepancy, Examples) {
    Rng rng(7);
    ProbeGrid g{standard_normal(2, 100, rng), uniform_vector(100, 0.1, 1.0, rng), standard_normal(2, 100, rng)};
    const DeterministicPredictor a = [](const Mat& xt, const Vec&, const Mat&) { return Mat(2.0 * xt); };
    EXPECT_EQ(drift_discrepancy(a, a, g), 0.0);
    const Vec delta = (Vec(2) << 0.3, 0.4).finished();
    const DeterministicPredictor b = [&](const Mat& xt, const Vec& t, const Mat& xT) {
        Mat out = a(xt, t, xT);
        out.colwise() += delta;
        return out;
    };
    const Mat pa = a(g.xt, g.t, g.xT);
    const double rms = std::sqrt(pa.squaredNorm() / 100.0);
    EXPECT_NEAR(drift_discrepancy(a, b, g), delta.norm() / rms, 1e-12);
}

TEST(MetricReport, JsonFields) {
    Rng rng(8);
    const Mat a = standard_normal(2, 200, rng), b = standard_normal(2, 200, rng);
    Rng p(9);
    MetricReport r = compare_samples(a, b, 8, p);
    r.nfe = 4;
    const auto j = to_json(r);
    EXPECT_GE(j["energy_distance"].get<double>(), 0.0);
    EXPECT_GE(j["sliced_w1"].get<double>(), 0.0);
    EXPECT_EQ(j["mean_gap"].size(), 2u);
    EXPECT_EQ(j["nfe"].get<int>(), 4);
    Rng q1(9), q2(9);
    EXPECT_EQ(to_json(compare_samples(a, b, 8, q1)).dump(), to_json(compare_samples(a, b, 8, q2)).dump());
}

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace ibmd {

using Vec = Eigen::VectorXd;
/// Batches are stored column-wise: one sample per column, shape D x N.
using Mat = Eigen::MatrixXd;

/// Raised when a run produces NaN/Inf or a loss explodes.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for malformed experiment configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

/// Independent generator for a named sub-stream of a root seed. Adding a new
/// stream never perturbs the sequence of an existing one.
inline Rng make_stream(std::uint64_t root_seed, std::string_view name) {
    return Rng(detail::splitmix64(root_seed ^ detail::splitmix64(detail::fnv1a(name))));
}

inline Mat standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Mat out(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = n01(rng);
    return out;
}

inline Vec uniform_vector(Eigen::Index n, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    Vec out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = u(rng);
    return out;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace ibmd

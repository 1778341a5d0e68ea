#pragma once

// Config-driven stages (teacher, distillation, evaluation, identity check) and
// their on-disk artifacts. Every stage draws randomness from named sub-streams
// of the root seed, so metrics.json is a pure function of config and seed.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibmd/bridges.hpp"
#include "ibmd/config.hpp"
#include "ibmd/distillation.hpp"
#include "ibmd/eval.hpp"
#include "ibmd/matching.hpp"
#include "ibmd/netcore.hpp"
#include "ibmd/oracles.hpp"

namespace ibmd {

inline constexpr const char* kLibraryVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Checkpoints with JSON sidecars describing the predictor layout

inline nlohmann::ordered_json layout_json(const PredictorLayout& l) {
    nlohmann::ordered_json j;
    j["dim"] = l.dim;
    j["conditional"] = l.conditional;
    j["noise_dim"] = l.noise_dim;
    j["embedding"] = l.embedding.method == EmbeddingMethod::ScalarAppend ? "scalar" : "sinusoidal";
    j["frequencies"] = l.embedding.frequencies;
    j["horizon"] = l.embedding.horizon;
    j["hidden"] = l.hidden;
    j["activation"] = to_string(l.activation);
    return j;
}

inline PredictorLayout layout_from_json(const nlohmann::json& j) {
    PredictorLayout l;
    try {
        l.dim = j.at("dim").get<int>();
        l.conditional = j.at("conditional").get<bool>();
        l.noise_dim = j.at("noise_dim").get<int>();
        l.embedding.method =
            j.at("embedding").get<std::string>() == "scalar" ? EmbeddingMethod::ScalarAppend : EmbeddingMethod::Sinusoidal;
        l.embedding.frequencies = j.at("frequencies").get<int>();
        l.embedding.horizon = j.at("horizon").get<double>();
        l.hidden = j.at("hidden").get<std::vector<int>>();
        l.activation = activation_from_string(j.at("activation").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint sidecar: ") + e.what());
    }
    return l;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
    std::filesystem::path p = ckpt;
    return p.replace_extension(".json");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw std::ios_base::failure("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Writes `<ckpt>` (netcore binary) and `<ckpt stem>.json`.
inline void save_predictor(const X0Predictor& net, const std::filesystem::path& ckpt, const std::string& role,
                           nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
    save_checkpoint(net.net(), ckpt.string());
    nlohmann::ordered_json side;
    side["role"] = role;
    side["layout"] = layout_json(net.layout());
    for (auto& [k, v] : extra.items()) side[k] = v;
    write_text(sidecar_path(ckpt), side.dump(2) + "\n");
}

inline X0Predictor load_predictor(const std::filesystem::path& ckpt) {
    if (!std::filesystem::exists(ckpt)) throw std::ios_base::failure("cannot open " + ckpt.string());
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_text(sidecar_path(ckpt)));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("checkpoint sidecar is not JSON: ") + e.what());
    }
    return X0Predictor(layout_from_json(side.at("layout")), load_checkpoint(ckpt.string()));
}

inline void save_generator(const Generator& g, const std::filesystem::path& ckpt) {
    save_predictor(g.net(), ckpt, "generator", {{"steps", g.steps()}, {"horizon", g.horizon()}});
}

inline Generator load_generator(const std::filesystem::path& ckpt) {
    const nlohmann::json side = nlohmann::json::parse(read_text(sidecar_path(ckpt)));
    return Generator(load_predictor(ckpt), side.at("steps").get<int>(), side.at("horizon").get<double>());
}

// ---------------------------------------------------------------------------
// Run context

/// Output sink; an empty directory disables artifact writing.
class RunDir {
public:
    RunDir() = default;
    explicit RunDir(std::filesystem::path dir) : dir_(std::move(dir)) {
        if (!dir_.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(dir_, ec);
            if (ec) throw std::ios_base::failure("cannot create output directory " + dir_.string() + ": " + ec.message());
        }
    }

    bool enabled() const { return !dir_.empty(); }
    std::filesystem::path path(const std::string& name) const { return dir_ / name; }

    void text(const std::string& name, const std::string& content) const {
        if (enabled()) write_text(path(name), content);
    }

private:
    std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Teacher stage

struct TeacherStage {
    X0Predictor net;
    std::vector<double> losses;
    nlohmann::ordered_json metrics;
};

namespace detail {

/// Mean relative L2 error of `net` against an exact posterior on bridge samples.
template <class Oracle>
double teacher_error_on_bridge(const X0Predictor& net, const Oracle& oracle, const Coupling& c, const Schedule& s,
                               int n, Rng& rng) {
    auto [x0, xT] = c.sample(n, rng);
    const Vec t = sample_times(s, n, rng);
    const Mat xt = sample_bridge_batch(s, x0, xT, t, rng);
    const Mat* cond = net.conditional() ? &xT : nullptr;
    const Mat want = oracle.posterior_mean(xt, t, cond);
    return (net.predict(xt, t, cond) - want).norm() / want.norm();
}

/// 1-D Gaussian joint: 20 times t_j = jT/20, 50 points spanning +-2.5 sd of x_t.
inline std::pair<Mat, Vec> gaussian_probe_grid(const CouplingSpec& c, const Schedule& s) {
    Mat xt(1, 1000);
    Vec t(1000);
    for (int j = 0; j < 20; ++j) {
        const double tj = s.horizon() * (j + 1) / 20.0;
        const BridgeCoeffs b = bridge_coeffs(s, tj);
        const double mean = b.a * c.muT(0) + b.b * c.mu0(0);
        const double var = b.a * b.a * c.sTT(0, 0) + b.b * b.b * c.s00(0, 0) + 2 * b.a * b.b * c.s0T(0, 0) + b.c2;
        for (int i = 0; i < 50; ++i) {
            xt(0, j * 50 + i) = mean + std::sqrt(var) * (-2.5 + 5.0 * i / 49.0);
            t(j * 50 + i) = tj;
        }
    }
    return {xt, t};
}

}  // namespace detail

inline TeacherStage run_teacher(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s) {
    TeacherStage out;
    if (!cfg.teacher.checkpoint.empty()) {
        out.net = load_predictor(cfg.teacher.checkpoint);
        if (out.net.dim() != c.dim()) throw ConfigError("teacher.checkpoint: dimension does not match the coupling");
    } else {
        Rng init = make_stream(cfg.seed, "teacher.init"), data = make_stream(cfg.seed, "teacher.data");
        TrainedTeacher t = train_teacher(c, s, cfg.teacher.build(), init, data);
        out.net = std::move(t.net);
        out.losses = std::move(t.losses);
    }

    nlohmann::ordered_json m;
    m["source"] = cfg.teacher.checkpoint.empty() ? "trained" : "checkpoint";
    m["iterations"] = static_cast<long>(out.losses.size());
    if (!out.losses.empty()) {
        const std::size_t tail = std::max<std::size_t>(1, out.losses.size() / 100);
        double mean = 0.0;
        for (std::size_t i = out.losses.size() - tail; i < out.losses.size(); ++i) mean += out.losses[i];
        m["final_loss"] = mean / static_cast<double>(tail);
    }
    Rng probe = make_stream(cfg.seed, "teacher.probe");
    if (c.kind() == CouplingKind::AnalyticGaussianJoint) {
        const GaussianJointOracle o(c, s);
        if (c.dim() == 1 && !out.net.conditional()) {
            const auto [xt, t] = detail::gaussian_probe_grid(cfg.coupling, s);
            const Mat want = o.posterior_mean(xt, t);
            m["grid_rel_l2"] = (out.net.predict(xt, t) - want).norm() / want.norm();
        }
        m["bridge_rel_l2"] = detail::teacher_error_on_bridge(out.net, o, c, s, 4000, probe);
    } else if (c.kind() == CouplingKind::FiniteSupport) {
        const FiniteOracle o(c, s);
        m["bridge_rel_l2"] = detail::teacher_error_on_bridge(out.net, o, c, s, 4000, probe);
    }
    out.metrics = m;
    return out;
}

// ---------------------------------------------------------------------------
// Distillation stage

struct DistillStage {
    DistillResult result;
    /// EMA generator snapshots keyed by round (0 = initialization).
    std::map<int, Generator> snapshots;
    long clean_draws = 0;
    nlohmann::ordered_json metrics;
};

inline DistillStage run_distill(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s,
                                const X0Predictor& teacher) {
    DistillStage out;
    const DistillConfig dc = cfg.distill.build();
    const std::set<int> wanted(cfg.distill.checkpoints.begin(), cfg.distill.checkpoints.end());
    if (wanted.count(0)) out.snapshots.emplace(0, Generator::from_teacher(teacher, dc.noise_dim, dc.steps, s.horizon()));
    const CorruptedSampler sampler(c);
    Rng rng = make_stream(cfg.seed, "distill");
    const long before = c.clean_draws();
    out.result = distill(teacher, sampler, s, dc, rng, [&](int k, const Generator& g, const X0Predictor&) {
        if (wanted.count(k)) out.snapshots.insert_or_assign(k, g);
    });
    out.clean_draws = c.clean_draws() - before;
    nlohmann::ordered_json m;
    m["rounds"] = dc.K;
    m["L"] = dc.L;
    m["steps"] = dc.steps;
    m["style"] = to_string(dc.style);
    m["clean_draws"] = out.clean_draws;
    if (!out.result.losses.empty()) {
        const std::size_t n = out.result.losses.size(), tail = std::max<std::size_t>(1, n / 100);
        double b = 0.0, g = 0.0;
        for (std::size_t i = n - tail; i < n; ++i) {
            b += out.result.losses[i].bridge_loss;
            g += out.result.losses[i].generator_loss;
        }
        m["final_bridge_loss"] = b / static_cast<double>(tail);
        m["final_generator_loss"] = g / static_cast<double>(tail);
    }
    out.metrics = m;
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation stage

struct EvalStage {
    nlohmann::ordered_json metrics;
    /// Mean energy distance per evaluated NFE.
    std::map<int, double> energy_by_nfe;
    std::optional<double> drift_discrepancy;
    /// (round, estimate, standard error) per distillation snapshot.
    std::vector<std::tuple<int, double, double>> path_kl;
    double path_kl_seconds = 0.0;
};

namespace detail {

inline DeterministicPredictor deterministic(const X0Predictor& net) {
    return [&net](const Mat& xt, const Vec& t, const Mat& xT) {
        return net.predict(xt, t, net.conditional() ? &xT : nullptr);
    };
}

/// Distinct x_T values of a finite coupling with the (x0, weight) atoms behind each.
inline std::vector<std::pair<Vec, std::vector<Atom>>> conditions(const Coupling& c) {
    std::vector<std::pair<Vec, std::vector<Atom>>> out;
    for (const Atom& a : c.atoms()) {
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == a.xT; });
        if (it == out.end()) out.push_back({a.xT, {a}});
        else it->second.push_back(a);
    }
    return out;
}

inline Mat sample_atoms(const std::vector<Atom>& atoms, Eigen::Index n, Rng& rng) {
    std::vector<double> w;
    for (const Atom& a : atoms) w.push_back(a.weight);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    Mat out(atoms.front().x0.size(), n);
    for (Eigen::Index j = 0; j < n; ++j) out.col(j) = atoms[pick(rng)].x0;
    return out;
}

inline bool non_increasing_within(const std::vector<double>& v, const std::vector<double>& tol) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[i - 1] + tol[i]) return false;
    return true;
}

}  // namespace detail

/// Sample quality per NFE against teacher SDE samples, drift discrepancy of a
/// freshly fitted bridge for the generator coupling, per-condition distances
/// for conditional finite couplings, and path-KL across snapshots.
inline EvalStage run_eval(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s, const X0Predictor& teacher,
                          const Generator& gen, const std::map<int, Generator>& snapshots = {}) {
    EvalStage out;
    const EvalSpec& e = cfg.eval;
    const CorruptedSampler sampler(c);
    const int n = e.samples;
    constexpr int kReplicates = 3;

    // Reference: teacher reverse SDE from fresh corrupted draws.
    Rng ref_rng = make_stream(cfg.seed, "eval.reference");
    const Mat xT = sampler.sample(n, ref_rng);
    const Mat ref = simulate_reverse(s, as_predictor_fn(teacher), xT, e.teacher_steps, ReverseMode::SDE, ref_rng).terminal();

    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    std::vector<double> means;
    std::vector<int> nfes = e.nfe;
    std::sort(nfes.begin(), nfes.end());
    nfes.erase(std::unique(nfes.begin(), nfes.end()), nfes.end());
    for (int nfe : nfes) {
        std::vector<double> eds;
        MetricReport first;
        for (int r = 0; r < kReplicates; ++r) {
            Rng rng = make_stream(cfg.seed, "eval.generator." + std::to_string(nfe) + "." + std::to_string(r));
            const Mat xs = sampler.sample(n, rng);
            gen.reset_evaluations();
            const Mat samples = multistep_infer(gen, s, xs, rng, nfe);
            MetricReport rep = compare_samples(samples, ref, e.projections, rng);
            rep.nfe = static_cast<int>(gen.evaluations() / n);
            eds.push_back(rep.energy_distance);
            if (r == 0) first = rep;
        }
        double mean = 0.0, var = 0.0;
        for (double d : eds) mean += d / kReplicates;
        for (double d : eds) var += (d - mean) * (d - mean) / (kReplicates - 1);
        const double sd = std::sqrt(var);
        auto row = to_json(first);
        row["energy_distance"] = mean;
        row["energy_distance_sd"] = sd;
        row["energy_distance_replicates"] = eds;
        rows.push_back(row);
        out.energy_by_nfe[nfe] = mean;
        means.push_back(mean);
    }
    // Trend in NFE: each step up may not raise the mean distance by more than
    // two pooled replicate standard deviations.
    std::vector<double> sds;
    for (const auto& r : rows) sds.push_back(r["energy_distance_sd"].get<double>());
    std::vector<double> tol(means.size(), 0.0);
    for (std::size_t i = 1; i < means.size(); ++i) tol[i] = 2.0 * std::sqrt(sds[i] * sds[i] + sds[i - 1] * sds[i - 1]);
    out.metrics["samples"] = n;
    out.metrics["teacher_steps"] = e.teacher_steps;
    out.metrics["rows"] = rows;
    out.metrics["nfe_trend_non_increasing"] = detail::non_increasing_within(means, tol);

    if (c.kind() == CouplingKind::FiniteSupport && gen.conditional()) {
        nlohmann::ordered_json per = nlohmann::ordered_json::array();
        Rng rng = make_stream(cfg.seed, "eval.conditions");
        for (const auto& [cond, atoms] : detail::conditions(c)) {
            const Mat xs = cond.replicate(1, n);
            const double ed = energy_distance(gen.one_step(xs, rng), detail::sample_atoms(atoms, n, rng));
            per.push_back({{"xT", detail::to_std(cond)}, {"energy_distance", ed}});
        }
        out.metrics["per_condition"] = per;
    }

    if (e.proxy_iterations > 0) {
        Rng init = make_stream(cfg.seed, "eval.proxy.init"), rng = make_stream(cfg.seed, "eval.proxy");
        const X0Predictor fresh(teacher.layout(), init);
        const X0Predictor proxy =
            fit_bridge_to_generator(fresh, gen, sampler, s, Weighting::one(), e.proxy_iterations, cfg.distill.batch_size,
                                    e.proxy_optimizer.resolved(e.proxy_iterations), cfg.distill.style, rng);
        Rng probe = make_stream(cfg.seed, "eval.probe");
        const int np = std::min(e.probe_points, n);
        ProbeGrid grid;
        grid.xT = xT.leftCols(np);
        grid.t = sample_times(s, np, probe);
        grid.xt = sample_bridge_batch(s, ref.leftCols(np), grid.xT, grid.t, probe);
        out.drift_discrepancy = drift_discrepancy(detail::deterministic(teacher), detail::deterministic(proxy), grid);
        out.metrics["drift_discrepancy"] = *out.drift_discrepancy;
        out.metrics["proxy_iterations"] = e.proxy_iterations;
    }

    if (!snapshots.empty() && e.kl_proxy_iterations > 0) {
        const auto t0 = std::chrono::steady_clock::now();
        const DriftFn teacher_u = reverse_sde_drift(s, drift_from_x0(s, detail::deterministic(teacher)));
        nlohmann::ordered_json kl = nlohmann::ordered_json::array();
        std::vector<double> values;
        for (const auto& [round, g] : snapshots) {
            // Shared init and data streams across snapshots keep the proxy
            // fitting noise common to all of them.
            Rng init = make_stream(cfg.seed, "eval.kl.init"), rng = make_stream(cfg.seed, "eval.kl.fit");
            const X0Predictor fresh(teacher.layout(), init);
            const X0Predictor proxy = fit_bridge_to_generator(
                fresh, g, sampler, s, Weighting::one(), e.kl_proxy_iterations, cfg.distill.batch_size,
                e.proxy_optimizer.resolved(e.kl_proxy_iterations), cfg.distill.style, rng);
            const DriftFn proxy_u = reverse_sde_drift(s, drift_from_x0(s, detail::deterministic(proxy)));
            const Generator* gp = &g;
            const MultistepStyle style = cfg.distill.style;
            const MarginalSampler marginal = bridge_marginal_sampler(
                s,
                [&sampler, gp, &s, style](Eigen::Index m, Rng& r) {
                    Mat x = sampler.sample(m, r);
                    Mat x0 = generator_training_x0(*gp, s, x, style, r);
                    return std::pair<Mat, Mat>{std::move(x0), std::move(x)};
                },
                e.kl_t_lo);
            Rng mc = make_stream(cfg.seed, "eval.kl.mc");
            const PathKlEstimate est = path_kl_estimate(proxy_u, teacher_u, marginal, s, e.kl_samples, mc);
            out.path_kl.emplace_back(round, est.value, est.stderr_value);
            values.push_back(est.value);
            kl.push_back({{"round", round}, {"value", est.value}, {"stderr", est.stderr_value}});
        }
        bool monotone = true;
        for (std::size_t i = 1; i < values.size(); ++i) monotone = monotone && values[i] < values[i - 1];
        out.metrics["path_kl"] = kl;
        out.metrics["path_kl_t_lo"] = e.kl_t_lo;
        out.metrics["path_kl_monotone"] = monotone;
        out.path_kl_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Identity check on an exact-oracle coupling

struct IdentityStage {
    IdentityReport perturbed;
    IdentityReport exact;
    nlohmann::ordered_json metrics;
};

inline nlohmann::ordered_json to_json(const IdentityReport& r) {
    return {{"lhs", r.lhs},       {"rhs", r.rhs},         {"gap", r.gap},          {"stderr", r.stderr_gap},
            {"lhs_stderr", r.lhs_stderr}, {"rhs_stderr", r.rhs_stderr}, {"n_mc", r.n_mc}, {"seed", r.seed}};
}

/// Teacher drift = exact posterior drift + perturbation * h(x_t, t) with h a
/// random MLP; the exact teacher is checked alongside.
template <class Oracle>
IdentityStage run_identity(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s, const Oracle& oracle,
                           bool conditional = false) {
    IdentityStage out;
    const DriftFn exact = drift_from_x0(s, [&oracle, conditional](const Mat& xt, const Vec& t, const Mat& xT) {
        return oracle.posterior_mean(xt, t, conditional ? &xT : nullptr);
    });
    PredictorLayout l;
    l.dim = c.dim();
    l.hidden = cfg.identity.hidden;
    l.embedding = TimeEmbedding{EmbeddingMethod::Sinusoidal, 2, s.horizon()};
    Rng init = make_stream(cfg.seed, "identity.net");
    std::vector<int> widths{l.input_dim()};
    widths.insert(widths.end(), l.hidden.begin(), l.hidden.end());
    widths.push_back(l.dim);
    const X0Predictor h(l, Mlp(widths, Activation::Tanh, init));
    const double eps = cfg.identity.perturbation;
    const DriftFn perturbed = [exact, &h, eps](const Mat& xt, const Vec& t, const Mat& xT) {
        return Mat(exact(xt, t, xT) + eps * (h.predict(xt, t) - xt));
    };
    const Weighting lambda = Weighting::constant(cfg.identity.lambda);
    Rng r1 = make_stream(cfg.seed, "identity.mc.perturbed"), r2 = make_stream(cfg.seed, "identity.mc.exact");
    out.perturbed = theorem_identity(c, oracle, perturbed, s, lambda, cfg.identity.n_mc, r1, conditional, cfg.seed);
    out.exact = theorem_identity(c, oracle, exact, s, lambda, cfg.identity.n_mc, r2, conditional, cfg.seed);
    out.metrics = to_json(out.perturbed);
    out.metrics["within_3_stderr"] = std::abs(out.perturbed.gap) < 3.0 * out.perturbed.stderr_gap;
    out.metrics["exact_teacher"] = to_json(out.exact);
    return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string compiler_version() {
#if defined(__clang__)
    return std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
    return std::string("gcc ") + __VERSION__;
#else
    return "unknown";
#endif
}

/// Human-readable summary; the only artifact that carries wall time.
inline std::string format_report(const std::string& command, const ExperimentConfig& cfg,
                                 const nlohmann::ordered_json& metrics, double seconds,
                                 const std::map<std::string, double>& timings = {}) {
    std::ostringstream os;
    os << "command: " << command << "\n";
    os << "seed: " << cfg.seed << "\n";
    os << "ibmd " << kLibraryVersion << ", " << compiler_version() << ", Eigen " << EIGEN_WORLD_VERSION << '.'
       << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION << "\n";
    os << "wall time: " << seconds << " s\n";
    for (const auto& [stage, t] : timings) os << "  " << stage << ": " << t << " s\n";
    os << "metrics:\n" << metrics.dump(2) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands

enum class Command { TrainTeacher, Distill, Eval, VerifyIdentity };

inline Command command_from_string(const std::string& s) {
    if (s == "train-teacher") return Command::TrainTeacher;
    if (s == "distill") return Command::Distill;
    if (s == "eval") return Command::Eval;
    if (s == "verify-identity") return Command::VerifyIdentity;
    throw std::invalid_argument("unknown command '" + s + "'");
}

struct RunResult {
    nlohmann::ordered_json metrics;
    /// False when the command's own check failed (identity gap, NFE trend).
    bool passed = true;
    double seconds = 0.0;
    /// Per-stage wall time; kept out of metrics.json.
    std::map<std::string, double> timings;
};

namespace detail {

inline std::string teacher_losses_csv(const std::vector<double>& losses) {
    std::ostringstream os;
    os.precision(17);
    os << "iteration,bm_loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
    return os.str();
}

inline std::string distill_losses_csv(const std::vector<RoundLoss>& losses) {
    std::ostringstream os;
    os.precision(17);
    os << "round,bridge_loss,generator_loss\n";
    for (const RoundLoss& r : losses) os << r.round << ',' << r.bridge_loss << ',' << r.generator_loss << '\n';
    return os.str();
}

/// Teacher SDE and generator paths for a handful of corrupted draws.
inline void write_trajectories(const RunDir& dir, const ExperimentConfig& cfg, const Coupling& c, const Schedule& s,
                               const X0Predictor& teacher, const Generator* gen) {
    if (!dir.enabled()) return;
    constexpr int kPaths = 16;
    Rng rng = make_stream(cfg.seed, "trajectories");
    const Mat xT = CorruptedSampler(c).sample(kPaths, rng);
    std::ostringstream os;
    write_trajectories_csv(os, simulate_reverse(s, as_predictor_fn(teacher), xT, 50, ReverseMode::SDE, rng));
    dir.text("teacher_trajectories.csv", os.str());
    if (gen) {
        std::ostringstream og;
        write_trajectories_csv(og, simulate_reverse(s, gen->as_predictor(), xT, gen->steps(), ReverseMode::Posterior, rng));
        dir.text("trajectories.csv", og.str());
    }
}

inline TeacherStage teacher_for(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s, const RunDir& dir) {
    TeacherStage t = run_teacher(cfg, c, s);
    if (dir.enabled() && cfg.teacher.checkpoint.empty()) {
        save_predictor(t.net, dir.path("teacher.ckpt"), "teacher");
        dir.text("teacher_losses.csv", teacher_losses_csv(t.losses));
    }
    return t;
}

template <class Oracle>
RunResult identity_result(const ExperimentConfig& cfg, const Coupling& c, const Schedule& s, const Oracle& o) {
    RunResult r;
    const IdentityStage st = run_identity(cfg, c, s, o, cfg.teacher.conditional);
    r.metrics["identity"] = st.metrics;
    r.passed = st.metrics["within_3_stderr"].get<bool>();
    return r;
}

}  // namespace detail

/// Runs one command, writing artifacts under cfg.output_dir (skipped when
/// empty). metrics.json carries no timing so reruns compare byte-for-byte.
inline RunResult run_command(Command cmd, const ExperimentConfig& cfg) {
    validate(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const Schedule s = build_schedule(cfg.schedule);
    const Coupling c = build_coupling(cfg.coupling);
    const RunDir dir(cfg.output_dir);
    RunResult r;
    r.metrics["seed"] = cfg.seed;

    switch (cmd) {
        case Command::TrainTeacher: {
            const TeacherStage t = run_teacher(cfg, c, s);
            if (dir.enabled()) {
                save_predictor(t.net, dir.path("teacher.ckpt"), "teacher");
                dir.text("losses.csv", detail::teacher_losses_csv(t.losses));
            }
            detail::write_trajectories(dir, cfg, c, s, t.net, nullptr);
            r.metrics["teacher"] = t.metrics;
            break;
        }
        case Command::Distill:
        case Command::Eval: {
            TeacherStage t;
            std::optional<Generator> loaded;
            DistillStage d;
            if (cmd == Command::Eval && !cfg.eval.generator_checkpoint.empty()) {
                ExperimentConfig tc = cfg;
                if (!cfg.eval.teacher_checkpoint.empty()) tc.teacher.checkpoint = cfg.eval.teacher_checkpoint;
                t = detail::teacher_for(tc, c, s, dir);
                loaded = load_generator(cfg.eval.generator_checkpoint);
                if (loaded->net().dim() != c.dim())
                    throw ConfigError("eval.generator_checkpoint: dimension does not match the coupling");
            } else {
                t = detail::teacher_for(cfg, c, s, dir);
                if (dir.enabled())
                    save_generator(Generator::from_teacher(t.net, cfg.distill.noise_dim, cfg.distill.steps, s.horizon()),
                                   dir.path("generator_init.ckpt"));
                d = run_distill(cfg, c, s, t.net);
                if (dir.enabled()) {
                    save_generator(d.result.generator, dir.path("generator.ckpt"));
                    for (const auto& [k, g] : d.snapshots)
                        save_generator(g, dir.path("generator_round_" + std::to_string(k) + ".ckpt"));
                    dir.text("losses.csv", detail::distill_losses_csv(d.result.losses));
                }
                r.metrics["distill"] = d.metrics;
            }
            const Generator& gen = loaded ? *loaded : d.result.generator;
            r.metrics["teacher"] = t.metrics;
            const long before = c.clean_draws();
            const EvalStage e = run_eval(cfg, c, s, t.net, gen, d.snapshots);
            r.metrics["eval"] = e.metrics;
            r.metrics["eval"]["clean_draws"] = c.clean_draws() - before;
            if (!e.path_kl.empty()) r.timings["path_kl"] = e.path_kl_seconds;
            r.passed = e.metrics["nfe_trend_non_increasing"].get<bool>();
            detail::write_trajectories(dir, cfg, c, s, t.net, &gen);
            break;
        }
        case Command::VerifyIdentity: {
            if (c.kind() == CouplingKind::FiniteSupport) {
                r = detail::identity_result(cfg, c, s, FiniteOracle(c, s));
            } else if (c.kind() == CouplingKind::AnalyticGaussianJoint) {
                r = detail::identity_result(cfg, c, s, GaussianJointOracle(c, s));
            } else {
                throw ConfigError("verify-identity: coupling.kind must be gaussian_joint or finite_support");
            }
            r.metrics = nlohmann::ordered_json{{"seed", cfg.seed}, {"identity", r.metrics["identity"]}};
            break;
        }
    }

    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dir.enabled()) {
        dir.text("metrics.json", r.metrics.dump(2) + "\n");
        dir.text("config.json", to_json(cfg).dump(2) + "\n");
        static const char* names[] = {"train-teacher", "distill", "eval", "verify-identity"};
        dir.text("report.txt", format_report(names[static_cast<int>(cmd)], cfg, r.metrics, r.seconds, r.timings));
    }
    return r;
}

}  // namespace ibmd

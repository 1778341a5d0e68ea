#pragma once

// Experiment configuration: a JSON document with nested sections, read
// against a fixed schema. Unknown keys, duplicate keys and type errors are
// collected over the whole document and reported together.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibmd/distillation.hpp"
#include "ibmd/matching.hpp"
#include "ibmd/schedules.hpp"
#include "ibmd/types.hpp"

namespace ibmd {

struct ScheduleSpec {
    std::string kind = "brownian";  // brownian | vp
    double epsilon = 1.0;
    double beta_min = 0.1;
    double beta_max = 20.0;
    double horizon = 1.0;
};

struct CouplingSpec {
    std::string kind = "independent";  // independent | gaussian_joint | finite_support | masked
    MixtureSpec target{{0.5, 0.5}, {(Vec(2) << 1.5, 0.0).finished(), (Vec(2) << -1.5, 0.0).finished()}, {0.4, 0.4}};
    GaussianSpec source{Vec::Zero(2), Mat::Identity(2, 2)};
    Vec mu0 = Vec::Zero(1), muT = Vec::Zero(1);
    Mat s00 = Mat::Identity(1, 1), sTT = Mat::Identity(1, 1), s0T = Mat::Zero(1, 1);
    std::vector<Atom> atoms;
    MaskedSpec masked;
};

/// Optimizer block; the cosine horizon is filled in by the stage that owns it.
struct OptimizerSpec {
    AdamConfig adam;
    bool cosine = false;

    AdamConfig resolved(long steps) const {
        AdamConfig a = adam;
        a.cosine_steps = cosine ? steps : 0;
        return a;
    }
};

struct WeightingSpec {
    std::string kind = "one";  // one | constant | table
    double value = 1.0;
    std::vector<std::pair<double, double>> table;

    Weighting build() const {
        if (kind == "constant") return Weighting::constant(value);
        if (kind == "table") return Weighting::from_table(table);
        return Weighting::one();
    }
};

struct TeacherSpec {
    bool conditional = false;
    int iterations = 20000;
    int batch_size = 256;
    std::vector<int> hidden{64, 64, 64};
    Activation activation = Activation::SiLU;
    EmbeddingMethod embedding = EmbeddingMethod::Sinusoidal;
    int frequencies = 8;
    OptimizerSpec optimizer{AdamConfig{3e-3, 0.9, 0.999, 1e-8, 0.99}, true};
    WeightingSpec weighting;
    /// Load this checkpoint (with its .json sidecar) instead of training.
    std::string checkpoint;

    TeacherConfig build() const {
        TeacherConfig c;
        c.conditional = conditional;
        c.lambda = weighting.build();
        c.batch_size = batch_size;
        c.iterations = iterations;
        c.adam = optimizer.resolved(iterations);
        c.hidden = hidden;
        c.activation = activation;
        c.embedding = embedding;
        c.frequencies = frequencies;
        return c;
    }
};

struct DistillSpec {
    int K = 1000;
    int L = 5;
    int batch_size = 256;
    int steps = 1;
    MultistepStyle style = MultistepStyle::SampledTime;
    int noise_dim = 2;
    OptimizerSpec generator_optimizer{AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.99}, false};
    OptimizerSpec bridge_optimizer{AdamConfig{1e-3, 0.9, 0.999, 1e-8, 0.99}, false};
    WeightingSpec weighting;
    /// Rounds at which the EMA generator is checkpointed (round 0 = init).
    std::vector<int> checkpoints;

    DistillConfig build() const {
        DistillConfig c;
        c.K = K;
        c.L = L;
        c.batch_size = batch_size;
        c.generator_adam = generator_optimizer.resolved(K);
        c.bridge_adam = bridge_optimizer.resolved(static_cast<long>(K) * L);
        c.lambda = weighting.build();
        c.steps = steps;
        c.style = style;
        c.noise_dim = noise_dim;
        return c;
    }
};

struct EvalSpec {
    int samples = 4000;
    int teacher_steps = 200;
    std::vector<int> nfe{1};
    int projections = 64;
    /// Fresh bridge fitted to the frozen generator, used as the BM-of-generator drift.
    int proxy_iterations = 10000;
    OptimizerSpec proxy_optimizer{AdamConfig{3e-3, 0.9, 0.999, 1e-8, 0.99}, true};
    int probe_points = 4000;
    /// Path-KL over distillation checkpoints; t is drawn on [kl_t_lo, T].
    long kl_samples = 100000;
    double kl_t_lo = 0.01;
    int kl_proxy_iterations = 5000;
    /// When set, eval loads these instead of running the pipeline.
    std::string teacher_checkpoint;
    std::string generator_checkpoint;
};

struct IdentitySpec {
    long n_mc = 1000000;
    /// Teacher drift = exact drift + perturbation * h(x_t, t), h a random MLP.
    double perturbation = 0.2;
    std::vector<int> hidden{16, 16};
    double lambda = 1.0;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    ScheduleSpec schedule;
    CouplingSpec coupling;
    TeacherSpec teacher;
    DistillSpec distill;
    EvalSpec eval;
    IdentitySpec identity;
};

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}

/// Reports keys repeated within one JSON object, with their dotted path.
inline std::vector<std::string> duplicate_keys(const std::string& text) {
    struct Frame {
        std::string path;
        bool object = false;
        std::set<std::string> keys;
        std::string last_key;
    };
    std::vector<Frame> stack;
    std::vector<std::string> dups;
    using E = nlohmann::json::parse_event_t;
    auto cb = [&](int, E ev, nlohmann::json& parsed) {
        if (ev == E::object_start || ev == E::array_start) {
            std::string path;
            if (!stack.empty())
                path = stack.back().object ? join_path(stack.back().path, stack.back().last_key)
                                           : stack.back().path + "[]";
            stack.push_back({path, ev == E::object_start, {}, {}});
        } else if (ev == E::object_end || ev == E::array_end) {
            if (!stack.empty()) stack.pop_back();
        } else if (ev == E::key && !stack.empty()) {
            const std::string k = parsed.get<std::string>();
            if (!stack.back().keys.insert(k).second) dups.push_back(join_path(stack.back().path, k));
            stack.back().last_key = k;
        }
        return true;
    };
    [[maybe_unused]] const nlohmann::json doc = nlohmann::json::parse(text, cb);
    return dups;
}

/// Schema walker: each accessor consumes a key; leftovers are unknown keys.
class Reader {
public:
    Reader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) errors_.push_back(where() + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            errors_.push_back(join_path(path_, key) + ": wrong type (got " + j_.at(key).type_name() + ")");
        }
    }

    void get_vec(const std::string& key, Vec& out) {
        std::vector<double> v;
        if (!has(key)) return;
        get(key, v);
        out = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }

    void get_mat(const std::string& key, Mat& out) {
        if (!has(key)) return;
        std::vector<std::vector<double>> rows;
        get(key, rows);
        const std::size_t r = rows.size(), c = r ? rows.front().size() : 0;
        for (const auto& row : rows)
            if (row.size() != c) {
                errors_.push_back(join_path(path_, key) + ": ragged matrix");
                return;
            }
        out.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < c; ++k)
                out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    }

    /// Child reader for a nested object, or nullopt when absent.
    std::optional<Reader> section(const std::string& key) {
        if (!has(key)) return std::nullopt;
        seen_.insert(key);
        return Reader(j_.at(key), join_path(path_, key), errors_);
    }

    const nlohmann::json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    /// Reader for an array element of `key`, sharing the error list.
    Reader element(const std::string& key, std::size_t i) const {
        return Reader(j_.at(key).at(i), join_path(path_, key) + "[" + std::to_string(i) + "]", errors_);
    }

    /// Records every key that no accessor consumed.
    void finish() {
        if (!j_.is_object()) return;
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) errors_.push_back(join_path(path_, k) + ": unknown key");
    }

    void error(const std::string& key, const std::string& msg) { errors_.push_back(join_path(path_, key) + ": " + msg); }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

inline void read_optimizer(Reader& r, OptimizerSpec& o) {
    r.get("lr", o.adam.lr);
    r.get("beta1", o.adam.beta1);
    r.get("beta2", o.adam.beta2);
    r.get("eps", o.adam.eps);
    r.get("ema_decay", o.adam.ema_decay);
    r.get("final_lr_fraction", o.adam.final_lr_fraction);
    std::string sched = o.cosine ? "cosine" : "constant";
    r.get("lr_schedule", sched);
    if (sched != "cosine" && sched != "constant") r.error("lr_schedule", "expected 'constant' or 'cosine'");
    o.cosine = sched == "cosine";
    r.finish();
}

inline void read_weighting(Reader& r, WeightingSpec& w) {
    r.get("kind", w.kind);
    r.get("value", w.value);
    if (r.has("table")) {
        std::vector<std::vector<double>> rows;
        r.get("table", rows);
        w.table.clear();
        for (const auto& row : rows) {
            if (row.size() != 2) {
                r.error("table", "rows must be [t, lambda] pairs");
                break;
            }
            w.table.emplace_back(row[0], row[1]);
        }
    }
    if (w.kind != "one" && w.kind != "constant" && w.kind != "table")
        r.error("kind", "expected 'one', 'constant' or 'table'");
    r.finish();
}

template <class Fn>
void with_section(Reader& parent, const std::string& key, Fn&& fn) {
    if (auto s = parent.section(key)) fn(*s);
}

inline void read_coupling(Reader& r, CouplingSpec& c) {
    r.get("kind", c.kind);
    with_section(r, "independent", [&](Reader& s) {
        with_section(s, "target", [&](Reader& t) {
            t.get("weights", c.target.weights);
            if (t.has("means")) {
                std::vector<std::vector<double>> means;
                t.get("means", means);
                c.target.means.clear();
                for (const auto& m : means) c.target.means.push_back(Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size())));
            }
            t.get("stds", c.target.stds);
            t.finish();
        });
        with_section(s, "source", [&](Reader& t) {
            t.get_vec("mean", c.source.mean);
            t.get_mat("cov", c.source.cov);
            t.finish();
        });
        s.finish();
    });
    with_section(r, "gaussian_joint", [&](Reader& s) {
        s.get_vec("mu0", c.mu0);
        s.get_vec("muT", c.muT);
        s.get_mat("s00", c.s00);
        s.get_mat("sTT", c.sTT);
        s.get_mat("s0T", c.s0T);
        s.finish();
    });
    with_section(r, "finite_support", [&](Reader& s) {
        if (s.has("atoms")) {
            const nlohmann::json& arr = s.raw("atoms");
            if (!arr.is_array()) {
                s.error("atoms", "expected an array");
            } else {
                c.atoms.clear();
                for (std::size_t i = 0; i < arr.size(); ++i) {
                    Reader a = s.element("atoms", i);
                    Atom atom;
                    a.get_vec("x0", atom.x0);
                    a.get_vec("xT", atom.xT);
                    a.get("weight", atom.weight);
                    a.finish();
                    c.atoms.push_back(std::move(atom));
                }
            }
        }
        s.finish();
    });
    with_section(r, "masked", [&](Reader& s) {
        s.get("offset", c.masked.offset);
        s.get("spread", c.masked.spread);
        s.get("modes", c.masked.modes);
        s.finish();
    });
    static const std::set<std::string> kinds{"independent", "gaussian_joint", "finite_support", "masked"};
    if (!kinds.count(c.kind)) r.error("kind", "expected one of independent, gaussian_joint, finite_support, masked");
    r.finish();
}

inline nlohmann::ordered_json optimizer_json(const OptimizerSpec& o) {
    nlohmann::ordered_json j;
    j["lr"] = o.adam.lr;
    j["beta1"] = o.adam.beta1;
    j["beta2"] = o.adam.beta2;
    j["eps"] = o.adam.eps;
    j["ema_decay"] = o.adam.ema_decay;
    j["lr_schedule"] = o.cosine ? "cosine" : "constant";
    j["final_lr_fraction"] = o.adam.final_lr_fraction;
    return j;
}

inline nlohmann::ordered_json weighting_json(const WeightingSpec& w) {
    nlohmann::ordered_json j;
    j["kind"] = w.kind;
    j["value"] = w.value;
    nlohmann::ordered_json t = nlohmann::ordered_json::array();
    for (const auto& [a, b] : w.table) t.push_back({a, b});
    j["table"] = t;
    return j;
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::ordered_json mat_json(const Mat& m) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_std(m.row(i).transpose()));
    return rows;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    std::vector<std::string> errors;
    for (const auto& k : detail::duplicate_keys(text)) errors.push_back(k + ": duplicate key");

    ExperimentConfig cfg;
    detail::Reader root(doc, "", errors);
    root.get("seed", cfg.seed);
    root.get("output_dir", cfg.output_dir);
    detail::with_section(root, "schedule", [&](detail::Reader& r) {
        r.get("kind", cfg.schedule.kind);
        r.get("epsilon", cfg.schedule.epsilon);
        r.get("beta_min", cfg.schedule.beta_min);
        r.get("beta_max", cfg.schedule.beta_max);
        r.get("horizon", cfg.schedule.horizon);
        if (cfg.schedule.kind != "brownian" && cfg.schedule.kind != "vp") r.error("kind", "expected 'brownian' or 'vp'");
        r.finish();
    });
    detail::with_section(root, "coupling", [&](detail::Reader& r) { detail::read_coupling(r, cfg.coupling); });
    detail::with_section(root, "teacher", [&](detail::Reader& r) {
        TeacherSpec& t = cfg.teacher;
        r.get("conditional", t.conditional);
        r.get("iterations", t.iterations);
        r.get("batch_size", t.batch_size);
        r.get("hidden", t.hidden);
        std::string act = to_string(t.activation);
        r.get("activation", act);
        try {
            t.activation = activation_from_string(act);
        } catch (const std::invalid_argument& e) {
            r.error("activation", e.what());
        }
        std::string emb = t.embedding == EmbeddingMethod::Sinusoidal ? "sinusoidal" : "scalar";
        r.get("embedding", emb);
        if (emb != "sinusoidal" && emb != "scalar") r.error("embedding", "expected 'sinusoidal' or 'scalar'");
        t.embedding = emb == "scalar" ? EmbeddingMethod::ScalarAppend : EmbeddingMethod::Sinusoidal;
        r.get("frequencies", t.frequencies);
        detail::with_section(r, "optimizer", [&](detail::Reader& o) { detail::read_optimizer(o, t.optimizer); });
        detail::with_section(r, "weighting", [&](detail::Reader& o) { detail::read_weighting(o, t.weighting); });
        r.get("checkpoint", t.checkpoint);
        r.finish();
    });
    detail::with_section(root, "distill", [&](detail::Reader& r) {
        DistillSpec& d = cfg.distill;
        r.get("K", d.K);
        r.get("L", d.L);
        r.get("batch_size", d.batch_size);
        r.get("steps", d.steps);
        std::string style = to_string(d.style);
        r.get("style", style);
        if (style != "sampled_time" && style != "full_inference")
            r.error("style", "expected 'sampled_time' or 'full_inference'");
        d.style = style == "full_inference" ? MultistepStyle::FullInference : MultistepStyle::SampledTime;
        r.get("noise_dim", d.noise_dim);
        detail::with_section(r, "generator_optimizer",
                             [&](detail::Reader& o) { detail::read_optimizer(o, d.generator_optimizer); });
        detail::with_section(r, "bridge_optimizer", [&](detail::Reader& o) { detail::read_optimizer(o, d.bridge_optimizer); });
        detail::with_section(r, "weighting", [&](detail::Reader& o) { detail::read_weighting(o, d.weighting); });
        r.get("checkpoints", d.checkpoints);
        r.finish();
    });
    detail::with_section(root, "eval", [&](detail::Reader& r) {
        EvalSpec& e = cfg.eval;
        r.get("samples", e.samples);
        r.get("teacher_steps", e.teacher_steps);
        r.get("nfe", e.nfe);
        r.get("projections", e.projections);
        r.get("proxy_iterations", e.proxy_iterations);
        detail::with_section(r, "proxy_optimizer", [&](detail::Reader& o) { detail::read_optimizer(o, e.proxy_optimizer); });
        r.get("probe_points", e.probe_points);
        r.get("kl_samples", e.kl_samples);
        r.get("kl_t_lo", e.kl_t_lo);
        r.get("kl_proxy_iterations", e.kl_proxy_iterations);
        r.get("teacher_checkpoint", e.teacher_checkpoint);
        r.get("generator_checkpoint", e.generator_checkpoint);
        r.finish();
    });
    detail::with_section(root, "identity", [&](detail::Reader& r) {
        r.get("n_mc", cfg.identity.n_mc);
        r.get("perturbation", cfg.identity.perturbation);
        r.get("hidden", cfg.identity.hidden);
        r.get("lambda", cfg.identity.lambda);
        r.finish();
    });
    root.finish();

    if (!errors.empty()) {
        std::ostringstream os;
        os << "invalid config (" << errors.size() << " problem" << (errors.size() > 1 ? "s" : "") << "):";
        for (const auto& e : errors) os << "\n  " << e;
        throw ConfigError(os.str());
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::ios_base::failure("cannot open config " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Full config with defaults filled in; parse_config(dump) reproduces it.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    using detail::mat_json;
    using detail::to_std;
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["schedule"] = {{"kind", c.schedule.kind},
                     {"epsilon", c.schedule.epsilon},
                     {"beta_min", c.schedule.beta_min},
                     {"beta_max", c.schedule.beta_max},
                     {"horizon", c.schedule.horizon}};

    nlohmann::ordered_json cp;
    cp["kind"] = c.coupling.kind;
    nlohmann::ordered_json means = nlohmann::ordered_json::array();
    for (const auto& m : c.coupling.target.means) means.push_back(to_std(m));
    cp["independent"] = {{"target", {{"weights", c.coupling.target.weights}, {"means", means}, {"stds", c.coupling.target.stds}}},
                         {"source", {{"mean", to_std(c.coupling.source.mean)}, {"cov", mat_json(c.coupling.source.cov)}}}};
    cp["gaussian_joint"] = {{"mu0", to_std(c.coupling.mu0)},
                            {"muT", to_std(c.coupling.muT)},
                            {"s00", mat_json(c.coupling.s00)},
                            {"sTT", mat_json(c.coupling.sTT)},
                            {"s0T", mat_json(c.coupling.s0T)}};
    nlohmann::ordered_json atoms = nlohmann::ordered_json::array();
    for (const auto& a : c.coupling.atoms)
        atoms.push_back({{"x0", to_std(a.x0)}, {"xT", to_std(a.xT)}, {"weight", a.weight}});
    cp["finite_support"] = {{"atoms", atoms}};
    cp["masked"] = {{"offset", c.coupling.masked.offset},
                    {"spread", c.coupling.masked.spread},
                    {"modes", c.coupling.masked.modes}};
    j["coupling"] = cp;

    const TeacherSpec& t = c.teacher;
    j["teacher"] = {{"conditional", t.conditional},
                    {"iterations", t.iterations},
                    {"batch_size", t.batch_size},
                    {"hidden", t.hidden},
                    {"activation", to_string(t.activation)},
                    {"embedding", t.embedding == EmbeddingMethod::ScalarAppend ? "scalar" : "sinusoidal"},
                    {"frequencies", t.frequencies},
                    {"optimizer", detail::optimizer_json(t.optimizer)},
                    {"weighting", detail::weighting_json(t.weighting)},
                    {"checkpoint", t.checkpoint}};

    const DistillSpec& d = c.distill;
    j["distill"] = {{"K", d.K},
                    {"L", d.L},
                    {"batch_size", d.batch_size},
                    {"steps", d.steps},
                    {"style", to_string(d.style)},
                    {"noise_dim", d.noise_dim},
                    {"generator_optimizer", detail::optimizer_json(d.generator_optimizer)},
                    {"bridge_optimizer", detail::optimizer_json(d.bridge_optimizer)},
                    {"weighting", detail::weighting_json(d.weighting)},
                    {"checkpoints", d.checkpoints}};

    const EvalSpec& e = c.eval;
    j["eval"] = {{"samples", e.samples},
                 {"teacher_steps", e.teacher_steps},
                 {"nfe", e.nfe},
                 {"projections", e.projections},
                 {"proxy_iterations", e.proxy_iterations},
                 {"proxy_optimizer", detail::optimizer_json(e.proxy_optimizer)},
                 {"probe_points", e.probe_points},
                 {"kl_samples", e.kl_samples},
                 {"kl_t_lo", e.kl_t_lo},
                 {"kl_proxy_iterations", e.kl_proxy_iterations},
                 {"teacher_checkpoint", e.teacher_checkpoint},
                 {"generator_checkpoint", e.generator_checkpoint}};
    j["identity"] = {{"n_mc", c.identity.n_mc},
                     {"perturbation", c.identity.perturbation},
                     {"hidden", c.identity.hidden},
                     {"lambda", c.identity.lambda}};
    return j;
}

// ---------------------------------------------------------------------------
// Builders; library argument errors surface as ConfigError.

inline Schedule build_schedule(const ScheduleSpec& s) {
    try {
        if (s.kind == "vp") return Schedule::variance_preserving(s.beta_min, s.beta_max, s.horizon);
        return Schedule::brownian(s.epsilon, s.horizon);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
}

inline Coupling build_coupling(const CouplingSpec& c) {
    try {
        if (c.kind == "gaussian_joint") return Coupling::gaussian_joint(c.mu0, c.muT, c.s00, c.sTT, c.s0T);
        if (c.kind == "finite_support") return Coupling::finite_support(c.atoms);
        if (c.kind == "masked") return Coupling::masked(c.masked);
        return Coupling::independent(c.target, c.source);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("coupling: ") + e.what());
    }
}

/// Range checks that the library would otherwise report mid-run.
inline void validate(const ExperimentConfig& c) {
    std::vector<std::string> errors;
    auto positive = [&](const std::string& key, double v) {
        if (!(v > 0)) errors.push_back(key + ": must be positive");
    };
    positive("teacher.iterations", c.teacher.iterations);
    positive("teacher.batch_size", c.teacher.batch_size);
    positive("distill.L", c.distill.L);
    positive("distill.batch_size", c.distill.batch_size);
    positive("distill.steps", c.distill.steps);
    positive("eval.samples", c.eval.samples);
    positive("eval.teacher_steps", c.eval.teacher_steps);
    positive("identity.n_mc", static_cast<double>(c.identity.n_mc));
    if (c.distill.K < 0) errors.push_back("distill.K: must be >= 0");
    if (c.distill.noise_dim < 0) errors.push_back("distill.noise_dim: must be >= 0");
    for (int k : c.distill.checkpoints)
        if (k < 0 || k > c.distill.K) errors.push_back("distill.checkpoints: round " + std::to_string(k) + " outside [0, K]");
    for (int n : c.eval.nfe)
        if (n < 1) errors.push_back("eval.nfe: entries must be >= 1");
    for (int h : c.teacher.hidden)
        if (h < 1) errors.push_back("teacher.hidden: widths must be >= 1");
    for (const auto& [key, w] : {std::pair{"teacher.weighting", &c.teacher.weighting},
                                 std::pair{"distill.weighting", &c.distill.weighting}}) {
        try {
            w->build();
        } catch (const std::invalid_argument& e) {
            errors.push_back(std::string(key) + ": " + e.what());
        }
    }
    if (!(c.eval.kl_t_lo >= 0 && c.eval.kl_t_lo < c.schedule.horizon))
        errors.push_back("eval.kl_t_lo: must lie in [0, horizon)");
    if (!errors.empty()) {
        std::ostringstream os;
        os << "invalid config (" << errors.size() << " problem" << (errors.size() > 1 ? "s" : "") << "):";
        for (const auto& e : errors) os << "\n  " << e;
        throw ConfigError(os.str());
    }
}

}  // namespace ibmd

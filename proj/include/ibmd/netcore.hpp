#pragma once

// Small dense networks with hand-written forward/backward passes, an Adam
// optimizer with an EMA shadow copy, and a flat binary checkpoint format.
//
// Parameters of an Mlp live in one contiguous vector; layer matrices are
// mapped views into it. Gradients use the same layout, which keeps the
// optimizer, EMA and checkpoint code layout-agnostic.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibmd/types.hpp"

namespace ibmd {

enum class Activation : std::uint32_t { ReLU = 0, SiLU = 1, Tanh = 2 };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::ReLU: return "relu";
        case Activation::SiLU: return "silu";
        case Activation::Tanh: return "tanh";
    }
    return "unknown";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::ReLU;
    if (s == "silu") return Activation::SiLU;
    if (s == "tanh") return Activation::Tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

class Mlp {
public:
    using MatMap = Eigen::Map<Mat>;
    using ConstMatMap = Eigen::Map<const Mat>;
    using VecMap = Eigen::Map<Vec>;
    using ConstVecMap = Eigen::Map<const Vec>;

    /// Per-layer pre-activations and outputs recorded by forward() for backward().
    struct Tape {
        Mat input;
        std::vector<Mat> pre;
        std::vector<Mat> post;
    };

    Mlp() = default;

    /// Zero-initialized network; widths = {in, hidden..., out}.
    Mlp(std::vector<int> widths, Activation act) : widths_(std::move(widths)), act_(act) {
        if (widths_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
        for (int w : widths_)
            if (w <= 0) throw std::invalid_argument("Mlp widths must be positive");
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
            w_off_.push_back(off);
            off += static_cast<std::size_t>(widths_[l]) * widths_[l + 1];
            b_off_.push_back(off);
            off += static_cast<std::size_t>(widths_[l + 1]);
        }
        params_ = Vec::Zero(static_cast<Eigen::Index>(off));
    }

    /// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Mlp(std::vector<int> widths, Activation act, Rng& rng) : Mlp(std::move(widths), act) {
        for (std::size_t l = 0; l < num_layers(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
            std::uniform_real_distribution<double> u(-bound, bound);
            auto w = weight(l);
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
            auto b = bias(l);
            for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = u(rng);
        }
    }

    std::size_t num_layers() const { return widths_.empty() ? 0 : widths_.size() - 1; }
    const std::vector<int>& widths() const { return widths_; }
    int input_dim() const { return widths_.front(); }
    int output_dim() const { return widths_.back(); }
    Activation activation() const { return act_; }

    Vec& params() { return params_; }
    const Vec& params() const { return params_; }
    Eigen::Index num_params() const { return params_.size(); }

    MatMap weight(std::size_t l) { return {params_.data() + w_off_[l], widths_[l + 1], widths_[l]}; }
    ConstMatMap weight(std::size_t l) const {
        return {params_.data() + w_off_[l], widths_[l + 1], widths_[l]};
    }
    VecMap bias(std::size_t l) { return {params_.data() + b_off_[l], widths_[l + 1]}; }
    ConstVecMap bias(std::size_t l) const { return {params_.data() + b_off_[l], widths_[l + 1]}; }

    Mat forward(const Mat& x) const {
        check_input(x);
        Mat h = x;
        for (std::size_t l = 0; l < num_layers(); ++l) {
            Mat z = weight(l) * h;
            z.colwise() += bias(l);
            h = (l + 1 < num_layers()) ? activate(z) : z;
        }
        return h;
    }

    Mat forward(const Mat& x, Tape& tape) const {
        check_input(x);
        tape.input = x;
        tape.pre.resize(num_layers());
        tape.post.resize(num_layers());
        const Mat* h = &tape.input;
        for (std::size_t l = 0; l < num_layers(); ++l) {
            tape.pre[l] = weight(l) * (*h);
            tape.pre[l].colwise() += bias(l);
            tape.post[l] = (l + 1 < num_layers()) ? activate(tape.pre[l]) : tape.pre[l];
            h = &tape.post[l];
        }
        return tape.post.back();
    }

    /// Backpropagates dL/d(output). Parameter gradients are ADDED into
    /// `param_grad` (same layout as params()) when it is non-null. Returns
    /// dL/d(input).
    Mat backward(const Tape& tape, const Mat& upstream, Vec* param_grad) const {
        if (upstream.rows() != output_dim() || upstream.cols() != tape.input.cols())
            throw std::invalid_argument("Mlp::backward: upstream gradient shape mismatch");
        if (param_grad && param_grad->size() != params_.size())
            throw std::invalid_argument("Mlp::backward: gradient buffer size mismatch");
        Mat g = upstream;
        for (std::size_t l = num_layers(); l-- > 0;) {
            const Mat& h_in = (l == 0) ? tape.input : tape.post[l - 1];
            if (param_grad) {
                MatMap dw(param_grad->data() + w_off_[l], widths_[l + 1], widths_[l]);
                VecMap db(param_grad->data() + b_off_[l], widths_[l + 1]);
                dw.noalias() += g * h_in.transpose();
                db += g.rowwise().sum();
            }
            Mat g_in = weight(l).transpose() * g;
            if (l > 0) g_in.array() *= activate_grad(tape.pre[l - 1], tape.post[l - 1]).array();
            g = std::move(g_in);
        }
        return g;
    }

private:
    void check_input(const Mat& x) const {
        if (x.rows() != input_dim()) {
            std::ostringstream os;
            os << "Mlp::forward: input has " << x.rows() << " rows, expected " << input_dim();
            throw std::invalid_argument(os.str());
        }
    }

    Mat activate(const Mat& z) const {
        switch (act_) {
            case Activation::ReLU: return z.cwiseMax(0.0);
            case Activation::SiLU: return (z.array() / (1.0 + (-z.array()).exp())).matrix();
            case Activation::Tanh: return z.array().tanh().matrix();
        }
        return z;
    }

    Mat activate_grad(const Mat& z, const Mat& y) const {
        switch (act_) {
            case Activation::ReLU: return (z.array() > 0.0).cast<double>().matrix();
            case Activation::SiLU: {
                const auto s = 1.0 / (1.0 + (-z.array()).exp());
                return (s * (1.0 + z.array() * (1.0 - s))).matrix();
            }
            case Activation::Tanh: return (1.0 - y.array().square()).matrix();
        }
        return Mat::Ones(z.rows(), z.cols());
    }

    std::vector<int> widths_;
    Activation act_ = Activation::SiLU;
    std::vector<std::size_t> w_off_;
    std::vector<std::size_t> b_off_;
    Vec params_;
};

/// Copy of `source` whose first layer accepts `extra_inputs` additional
/// trailing input channels with zero weights, so the new network computes the
/// same function of the original inputs regardless of the extra ones.
inline Mlp clone_initialize(const Mlp& source, int extra_inputs) {
    if (extra_inputs < 0) throw std::invalid_argument("clone_initialize: negative extra inputs");
    std::vector<int> widths = source.widths();
    widths.front() += extra_inputs;
    Mlp out(widths, source.activation());
    for (std::size_t l = 0; l < source.num_layers(); ++l) {
        auto w = out.weight(l);
        const auto src = source.weight(l);
        w.leftCols(src.cols()) = src;
        out.bias(l) = source.bias(l);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Time conditioning

enum class EmbeddingMethod : std::uint32_t { ScalarAppend = 0, Sinusoidal = 1 };

/// Maps t in [0, T] to features. ScalarAppend gives [t/T] (dim 1).
/// Sinusoidal gives [t/T, sin(pi k t/T), cos(pi k t/T) for k = 1..K]
/// (dim 1 + 2K).
struct TimeEmbedding {
    EmbeddingMethod method = EmbeddingMethod::Sinusoidal;
    int frequencies = 8;
    double horizon = 1.0;

    int dim() const { return method == EmbeddingMethod::ScalarAppend ? 1 : 1 + 2 * frequencies; }

    Mat embed(const Vec& t) const {
        Mat out(dim(), t.size());
        for (Eigen::Index j = 0; j < t.size(); ++j) {
            const double u = t(j) / horizon;
            out(0, j) = u;
            if (method == EmbeddingMethod::Sinusoidal) {
                for (int k = 1; k <= frequencies; ++k) {
                    out(2 * k - 1, j) = std::sin(std::numbers::pi * k * u);
                    out(2 * k, j) = std::cos(std::numbers::pi * k * u);
                }
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Data predictor x0_hat(x_t, t[, x_T][, z])

struct PredictorLayout {
    int dim = 1;
    bool conditional = false;
    int noise_dim = 0;
    TimeEmbedding embedding{};
    std::vector<int> hidden{64, 64};
    Activation activation = Activation::SiLU;

    int input_dim() const { return dim + embedding.dim() + (conditional ? dim : 0) + noise_dim; }
};

/// Residual data predictor: x0_hat = x_t + net([x_t; emb(t); x_T?; z?]).
/// Input rows are concatenated in that order. The final layer starts at zero,
/// so a fresh predictor is the identity on x_t.
class X0Predictor {
public:
    struct Tape {
        Mlp::Tape net;
    };

    /// Input gradients of a backward pass.
    struct InputGrads {
        Mat xt;
        Mat xT;
        Mat z;
    };

    X0Predictor() = default;

    X0Predictor(PredictorLayout layout, Rng& rng) : layout_(std::move(layout)) {
        std::vector<int> widths{layout_.input_dim()};
        widths.insert(widths.end(), layout_.hidden.begin(), layout_.hidden.end());
        widths.push_back(layout_.dim);
        net_ = Mlp(widths, layout_.activation, rng);
        const std::size_t last = net_.num_layers() - 1;
        net_.weight(last).setZero();
        net_.bias(last).setZero();
    }

    X0Predictor(PredictorLayout layout, Mlp net) : layout_(std::move(layout)), net_(std::move(net)) {
        if (net_.input_dim() != layout_.input_dim() || net_.output_dim() != layout_.dim)
            throw std::invalid_argument("X0Predictor: network shape does not match layout");
    }

    const PredictorLayout& layout() const { return layout_; }
    int dim() const { return layout_.dim; }
    bool conditional() const { return layout_.conditional; }
    int noise_dim() const { return layout_.noise_dim; }

    Mlp& net() { return net_; }
    const Mlp& net() const { return net_; }

    Mat predict(const Mat& xt, const Vec& t, const Mat* xT = nullptr, const Mat* z = nullptr) const {
        return xt + net_.forward(assemble(xt, t, xT, z));
    }

    Mat predict(const Mat& xt, const Vec& t, const Mat* xT, const Mat* z, Tape& tape) const {
        return xt + net_.forward(assemble(xt, t, xT, z), tape.net);
    }

    /// dL/dx0_hat -> input gradients; parameter gradients accumulate into
    /// `param_grad` when non-null.
    InputGrads backward(const Tape& tape, const Mat& upstream, Vec* param_grad) const {
        Mat g = net_.backward(tape.net, upstream, param_grad);
        InputGrads out;
        const int d = layout_.dim;
        out.xt = upstream + g.topRows(d);
        Eigen::Index row = d + layout_.embedding.dim();
        if (layout_.conditional) {
            out.xT = g.middleRows(row, d);
            row += d;
        }
        if (layout_.noise_dim > 0) out.z = g.middleRows(row, layout_.noise_dim);
        return out;
    }

    /// Same function of (x_t, t, x_T) with `extra_noise` zero-weighted noise channels appended.
    X0Predictor with_noise_channels(int extra_noise) const {
        PredictorLayout l = layout_;
        l.noise_dim += extra_noise;
        return X0Predictor(l, clone_initialize(net_, extra_noise));
    }

private:
    Mat assemble(const Mat& xt, const Vec& t, const Mat* xT, const Mat* z) const {
        const Eigen::Index n = xt.cols();
        const int d = layout_.dim;
        if (xt.rows() != d || t.size() != n)
            throw std::invalid_argument("X0Predictor: x_t / t shape mismatch");
        if (layout_.conditional && (!xT || xT->rows() != d || xT->cols() != n))
            throw std::invalid_argument("X0Predictor: conditional predictor needs x_T of matching shape");
        if (layout_.noise_dim > 0 && (!z || z->rows() != layout_.noise_dim || z->cols() != n))
            throw std::invalid_argument("X0Predictor: noise input shape mismatch");
        Mat in(layout_.input_dim(), n);
        in.topRows(d) = xt;
        Eigen::Index row = d;
        in.middleRows(row, layout_.embedding.dim()) = layout_.embedding.embed(t);
        row += layout_.embedding.dim();
        if (layout_.conditional) {
            in.middleRows(row, d) = *xT;
            row += d;
        }
        if (layout_.noise_dim > 0) in.middleRows(row, layout_.noise_dim) = *z;
        return in;
    }

    PredictorLayout layout_;
    Mlp net_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double ema_decay = 0.999;
    /// When > 0, the step size follows a cosine from lr down to
    /// lr * final_lr_fraction over this many steps, then stays there.
    long cosine_steps = 0;
    double final_lr_fraction = 0.0;
};

/// Adam moments plus an EMA copy of the parameters it updates.
class OptimizerState {
public:
    OptimizerState() = default;
    OptimizerState(const AdamConfig& cfg, const Vec& params)
        : cfg_(cfg), m_(Vec::Zero(params.size())), v_(Vec::Zero(params.size())), ema_(params) {
        if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0))
            throw std::invalid_argument("EMA decay must lie in [0, 1)");
        if (!(cfg.lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
        if (!(cfg.final_lr_fraction >= 0.0 && cfg.final_lr_fraction <= 1.0))
            throw std::invalid_argument("final_lr_fraction must lie in [0, 1]");
    }

    const AdamConfig& config() const { return cfg_; }
    long steps() const { return step_; }

    /// Step size used by the next update.
    double current_lr() const {
        if (cfg_.cosine_steps <= 0) return cfg_.lr;
        const double u = std::min(1.0, static_cast<double>(step_) / static_cast<double>(cfg_.cosine_steps));
        const double f = cfg_.final_lr_fraction;
        return cfg_.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * u)));
    }
    const Vec& ema() const { return ema_; }

    void step(Vec& params, const Vec& grad) {
        if (grad.size() != params.size() || params.size() != m_.size())
            throw std::invalid_argument("OptimizerState::step: size mismatch");
        if (!grad.allFinite()) {
            std::ostringstream os;
            os << "non-finite gradient at optimizer step " << step_;
            throw NumericalError(os.str());
        }
        const double lr = current_lr();
        ++step_;
        m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        params.array() -= lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
        ema_ = cfg_.ema_decay * ema_ + (1.0 - cfg_.ema_decay) * params;
    }

    void step(Mlp& net, const Vec& grad) { step(net.params(), grad); }

private:
    AdamConfig cfg_;
    Vec m_;
    Vec v_;
    Vec ema_;
    long step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "IBMDNET\0", u32 version, u32 activation id, u64 layer count + 1,
// u64 widths..., u64 parameter count, then little-endian float64 parameters.

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'I', 'B', 'M', 'D', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put_le(std::string& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint truncated");
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace detail

inline std::string serialize(const Mlp& net) {
    std::string out(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::put_le<std::uint32_t>(out, detail::kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.activation()));
    detail::put_le<std::uint64_t>(out, net.widths().size());
    for (int w : net.widths()) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(w));
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(net.num_params()));
    for (Eigen::Index i = 0; i < net.num_params(); ++i) detail::put_le<double>(out, net.params()(i));
    return out;
}

inline Mlp deserialize_mlp(const std::string& bytes) {
    if (bytes.size() < sizeof(detail::kCheckpointMagic) ||
        std::memcmp(bytes.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
        throw std::runtime_error("not an IBMD network checkpoint (bad magic)");
    std::size_t pos = sizeof(detail::kCheckpointMagic);
    const auto version = detail::get_le<std::uint32_t>(bytes, pos);
    if (version != detail::kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto act = detail::get_le<std::uint32_t>(bytes, pos);
    if (act > 2) throw std::runtime_error("checkpoint has unknown activation id");
    const auto nw = detail::get_le<std::uint64_t>(bytes, pos);
    std::vector<int> widths;
    for (std::uint64_t i = 0; i < nw; ++i)
        widths.push_back(static_cast<int>(detail::get_le<std::uint64_t>(bytes, pos)));
    Mlp net(widths, static_cast<Activation>(act));
    const auto np = detail::get_le<std::uint64_t>(bytes, pos);
    if (np != static_cast<std::uint64_t>(net.num_params()))
        throw std::runtime_error("checkpoint parameter count does not match widths");
    for (Eigen::Index i = 0; i < net.num_params(); ++i) net.params()(i) = detail::get_le<double>(bytes, pos);
    if (pos != bytes.size()) throw std::runtime_error("checkpoint has trailing bytes");
    return net;
}

inline void save_checkpoint(const Mlp& net, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot open " + path + " for writing");
    const std::string bytes = serialize(net);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::ios_base::failure("write failed: " + path);
}

inline Mlp load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::ios_base::failure("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_mlp(ss.str());
}

}  // namespace ibmd

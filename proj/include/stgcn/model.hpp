#pragma once

// Spatio-temporal graph convolutional classifier.
//
//   [N, L, 1] --temporal gated conv--> [N, L-Kt+1, c_o]
//             --S H Theta per step---> [N, L-Kt+1, c_s]
//             --relu, layer norm, dropout, mean over time--> [N, c_s]
//             --fc, relu, dropout, fc--> [C] logits

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgcn/graph.hpp"
#include "stgcn/signal.hpp"
#include "stgcn/tensor.hpp"

namespace stgcn {

struct ModelConfig {
    std::size_t n_nodes = 128;
    std::size_t window_len = 512;
    std::size_t kt = 5;           // temporal kernel width
    std::size_t c_in = 1;
    std::size_t c_temporal = 64;  // c_o: GLU output channels
    std::size_t c_spatial = 64;   // c_s: graph conv output channels
    std::size_t hidden = 128;
    std::size_t classes = 65;
    double dropout = 0.5;
    bool head_dropout = true;     // also drop the hidden FC activations
    double ln_eps = 1e-5;

    std::size_t time_steps() const { return window_len - kt + 1; }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (n_nodes < 1) fail("n_nodes must be >= 1");
        if (kt < 1 || kt > window_len) fail("need 1 <= K_t <= window_len");
        if (c_in < 1 || c_temporal < 1 || c_spatial < 1 || hidden < 1) fail("widths must be >= 1");
        if (classes < 2) fail("need at least 2 classes");
        if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
        if (!(ln_eps > 0.0)) fail("layer-norm eps must be > 0");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
    Tensor temporal_kernel;  // [Kt, c_in, 2 c_o]
    Tensor spatial_weight;   // [c_o, c_s]
    Tensor ln_gain;          // [c_s]
    Tensor ln_bias;          // [c_s]
    Tensor fc1_weight;       // [N c_s, hidden]
    Tensor fc1_bias;         // [hidden]
    Tensor fc2_weight;       // [hidden, C]
    Tensor fc2_bias;         // [C]

    static constexpr std::size_t kCount = 8;
    static constexpr std::array<const char*, kCount> kNames = {
        "temporal_kernel", "spatial_weight", "ln_gain",    "ln_bias",
        "fc1_weight",      "fc1_bias",       "fc2_weight", "fc2_bias"};

    std::array<Tensor*, kCount> tensors() {
        return {&temporal_kernel, &spatial_weight, &ln_gain,    &ln_bias,
                &fc1_weight,      &fc1_bias,       &fc2_weight, &fc2_bias};
    }
    std::array<const Tensor*, kCount> tensors() const {
        return {&temporal_kernel, &spatial_weight, &ln_gain,    &ln_bias,
                &fc1_weight,      &fc1_bias,       &fc2_weight, &fc2_bias};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor* t : tensors()) n += t->size();
        return n;
    }

    bool operator==(const ModelParams&) const = default;
};

inline std::array<Shape, ModelParams::kCount> param_shapes(const ModelConfig& c) {
    return {Shape{c.kt, c.c_in, 2 * c.c_temporal},
            Shape{c.c_temporal, c.c_spatial},
            Shape{c.c_spatial},
            Shape{c.c_spatial},
            Shape{c.n_nodes * c.c_spatial, c.hidden},
            Shape{c.hidden},
            Shape{c.hidden, c.classes},
            Shape{c.classes}};
}

/// All-zero parameters with the config's shapes (also used as a gradient
/// accumulator).
inline ModelParams zero_params(const ModelConfig& cfg) {
    ModelParams p;
    const auto shapes = param_shapes(cfg);
    auto ts = p.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) *ts[i] = Tensor(shapes[i]);
    return p;
}

/// Uniform in [0, 1) from the top 53 bits; fixed across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Glorot-uniform weights, zero biases, unit layer-norm gain.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p = zero_params(cfg);
    std::mt19937_64 rng(seed);
    auto glorot = [&](Tensor& t, double fan_in, double fan_out) {
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.data) v = (2.0 * uniform01(rng) - 1.0) * limit;
    };
    const auto k = static_cast<double>(cfg.kt);
    glorot(p.temporal_kernel, k * static_cast<double>(cfg.c_in),
           k * static_cast<double>(2 * cfg.c_temporal));
    glorot(p.spatial_weight, static_cast<double>(cfg.c_temporal),
           static_cast<double>(cfg.c_spatial));
    std::fill(p.ln_gain.data.begin(), p.ln_gain.data.end(), 1.0);
    glorot(p.fc1_weight, static_cast<double>(cfg.n_nodes * cfg.c_spatial),
           static_cast<double>(cfg.hidden));
    glorot(p.fc2_weight, static_cast<double>(cfg.hidden), static_cast<double>(cfg.classes));
    return p;
}

/// Parameters bound as leaves on one tape.
struct ParamVars {
    std::array<Var, ModelParams::kCount> v;

    const Var& temporal_kernel() const { return v[0]; }
    const Var& spatial_weight() const { return v[1]; }
    const Var& ln_gain() const { return v[2]; }
    const Var& ln_bias() const { return v[3]; }
    const Var& fc1_weight() const { return v[4]; }
    const Var& fc1_bias() const { return v[5]; }
    const Var& fc2_weight() const { return v[6]; }
    const Var& fc2_bias() const { return v[7]; }
};

inline ParamVars bind_params(Tape& tape, const ModelParams& p, bool requires_grad) {
    ParamVars out;
    const auto ts = p.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) out.v[i] = tape.leaf(*ts[i], requires_grad);
    return out;
}

/// Adds the leaf gradients of a finished backward pass into acc.
inline void accumulate_grads(const ParamVars& vars, ModelParams& acc) {
    auto ts = acc.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
        const auto& g = vars.v[i].grad();
        auto& dst = ts[i]->data;
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
    }
}

// ---------------------------------------------------------------------------
// Layers

/// Valid convolution along time producing [P Q] (2 c_o channels), then the
/// gated linear unit P * sigmoid(Q). u: [N, L, c_i], gamma: [Kt, c_i, 2 c_o].
inline Var temporal_gated_conv(const Var& u, const Var& gamma) {
    const Shape us = u.shape();
    const Shape gs = gamma.shape();
    if (us.size() != 3 || gs.size() != 3 || gs[2] % 2 != 0) {
        throw ShapeError("temporal_gated_conv: expected u [N, L, c_i] and kernel [Kt, c_i, 2c_o], got " +
                         to_string(us) + " and " + to_string(gs));
    }
    if (us[1] < gs[0]) {
        throw std::invalid_argument("temporal_gated_conv: window length " + std::to_string(us[1]) +
                                    " < K_t " + std::to_string(gs[0]));
    }
    const std::size_t co = gs[2] / 2;
    Var pq = conv1d_valid(u, gamma);
    return mul(slice_last(pq, 0, co), sigmoid(slice_last(pq, co, 2 * co)));
}

/// S H Theta at every time step. s: [N, N]; h: [N, T, c_o] or [N, c_o];
/// theta: [c_o, c_s].
inline Var spatial_graph_conv(const Var& s, const Var& h, const Var& theta) {
    const Shape hs = h.shape();
    const Shape ss = s.shape();
    const Shape ths = theta.shape();
    if (ss.size() != 2 || ss[0] != ss[1] || (hs.size() != 2 && hs.size() != 3) ||
        hs[0] != ss[0] || ths.size() != 2 || ths[0] != hs.back()) {
        throw ShapeError("spatial_graph_conv: expected S [N, N], H [N, (T,) c_o], Theta [c_o, c_s]; got " +
                         to_string(ss) + ", " + to_string(hs) + ", " + to_string(ths));
    }
    const std::size_t n = hs[0], co = hs.back(), cs = ths[1];
    const std::size_t steps = hs.size() == 3 ? hs[1] : 1;
    // Row-major [N, T, c_o] is [N, T c_o] for node mixing and [N T, c_o] for
    // feature mixing.
    Var mixed = matmul(s, reshape(h, {n, steps * co}));
    Var out = matmul(reshape(mixed, {n * steps, co}), theta);
    return reshape(out, hs.size() == 3 ? Shape{n, steps, cs} : Shape{n, cs});
}

/// Normalizes the last axis to zero mean / unit variance, then gain and bias.
inline Var layer_norm(const Var& h, const Var& gain, const Var& bias, double eps = 1e-5) {
    const Shape hs = h.shape();
    if (hs.size() < 2 || gain.shape() != Shape{hs.back()} || bias.shape() != Shape{hs.back()}) {
        throw ShapeError("layer_norm: expected H [..., c] with gain/bias [c]; got " + to_string(hs) +
                         ", " + to_string(gain.shape()) + ", " + to_string(bias.shape()));
    }
    const std::size_t last = hs.size() - 1;
    Var mean = mean_axis(h, last);
    Var var = var_axis(h, last);
    Var centered = sub(h, expand_trailing(mean, hs));
    Var normed = div(centered, expand_trailing(sqrt(add_scalar(var, eps)), hs));
    return add(mul(normed, expand_leading(gain, hs)), expand_leading(bias, hs));
}

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// Identity when not training or p == 0.
inline Var dropout(const Var& h, double p, std::mt19937_64& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
    if (!training || p == 0.0) return h;
    const double keep = 1.0 / (1.0 - p);
    Var mask = h.tape()->constant_generated(h.shape(), [&] { return uniform01(rng) < p ? 0.0 : keep; });
    return mul(h, mask);
}

struct HeadDropout {
    double p = 0.0;
    std::mt19937_64* rng = nullptr;
    bool training = false;
};

/// flatten -> fc1 -> relu -> (dropout) -> fc2. features: [N, c_s] -> [C].
inline Var classifier_head(const Var& features, const Var& w1, const Var& b1, const Var& w2,
                           const Var& b2, HeadDropout drop = {}) {
    const std::size_t flat = features.value().size();
    const std::size_t hidden = b1.value().size();
    const std::size_t classes = b2.value().size();
    Var x = reshape(features, {1, flat});
    Var z = relu(add(matmul(x, w1), reshape(b1, {1, hidden})));
    if (drop.rng != nullptr) z = dropout(z, drop.p, *drop.rng, drop.training);
    Var logits = add(matmul(z, w2), reshape(b2, {1, classes}));
    return reshape(logits, {classes});
}

/// Full forward pass for one window with its own propagation matrix.
/// Returns logits [C]. The rng is only touched when training with p > 0.
inline Var stgcn_forward(Tape& tape, const ParamVars& pv, const Tensor& window,
                         const Tensor& propagation, const ModelConfig& cfg, bool training,
                         std::mt19937_64& rng) {
    if (window.shape != Shape{cfg.n_nodes, cfg.window_len}) {
        throw ShapeError("stgcn_forward: window must be " +
                         to_string(Shape{cfg.n_nodes, cfg.window_len}) + ", got " +
                         to_string(window.shape));
    }
    if (propagation.shape != Shape{cfg.n_nodes, cfg.n_nodes}) {
        throw ShapeError("stgcn_forward: propagation matrix must be " +
                         to_string(Shape{cfg.n_nodes, cfg.n_nodes}) + ", got " +
                         to_string(propagation.shape));
    }
    Var u = tape.leaf(Shape{cfg.n_nodes, cfg.window_len, 1}, window.data, false);
    Var s = tape.constant(propagation);
    Var h = temporal_gated_conv(u, pv.temporal_kernel());
    h = relu(spatial_graph_conv(s, h, pv.spatial_weight()));
    h = layer_norm(h, pv.ln_gain(), pv.ln_bias(), cfg.ln_eps);
    h = dropout(h, cfg.dropout, rng, training);
    Var pooled = mean_axis(h, 1);
    HeadDropout hd;
    if (cfg.head_dropout) hd = {cfg.dropout, &rng, training};
    return classifier_head(pooled, pv.fc1_weight(), pv.fc1_bias(), pv.fc2_weight(), pv.fc2_bias(),
                           hd);
}

/// Eval-mode logits for a batch: [B, C]. Window b is paired with
/// propagations[b].
inline Tensor stgcn_forward_batch(const ModelParams& params, const ModelConfig& cfg,
                                  std::span<const Tensor> windows,
                                  std::span<const Tensor> propagations) {
    if (windows.size() != propagations.size()) {
        throw std::invalid_argument("stgcn_forward_batch: one propagation matrix per window");
    }
    Tensor out(Shape{windows.size(), cfg.classes});
    std::mt19937_64 unused(0);
    for (std::size_t b = 0; b < windows.size(); ++b) {
        Tape tape;
        const ParamVars pv = bind_params(tape, params, false);
        Var logits = stgcn_forward(tape, pv, windows[b], propagations[b], cfg, false, unused);
        std::copy(logits.value().data.begin(), logits.value().data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(b * cfg.classes));
    }
    return out;
}

/// argmax; ties go to the smallest index.
inline std::size_t predict(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("predict: empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "STGW" | u32 version | config block | u32 tensor count |
//   per tensor: u32 rank, u64 dims[rank], f64 payload
// Config block: u64 n_nodes, window_len, kt, c_in, c_temporal, c_spatial,
// hidden, classes; f64 dropout, ln_eps; u8 head_dropout. All little-endian.

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'T', 'G', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw CheckpointError("checkpoint truncated while reading " + what);
    }
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelConfig& cfg, const ModelParams& p) {
    using detail::put;
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    put<std::uint32_t>(os, kCheckpointVersion);
    for (std::size_t v : {cfg.n_nodes, cfg.window_len, cfg.kt, cfg.c_in, cfg.c_temporal,
                          cfg.c_spatial, cfg.hidden, cfg.classes}) {
        put<std::uint64_t>(os, v);
    }
    put<double>(os, cfg.dropout);
    put<double>(os, cfg.ln_eps);
    put<std::uint8_t>(os, cfg.head_dropout ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ModelParams::kCount));
    for (const Tensor* t : p.tensors()) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape) put<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t->data.data()),
                 static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
}

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
    using detail::get;
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
        throw CheckpointError("checkpoint: bad magic (expected STGW)");
    }
    if (const auto v = get<std::uint32_t>(is, "version"); v != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
    }
    Checkpoint ck;
    ModelConfig& c = ck.config;
    for (std::size_t* f : {&c.n_nodes, &c.window_len, &c.kt, &c.c_in, &c.c_temporal, &c.c_spatial,
                           &c.hidden, &c.classes}) {
        *f = static_cast<std::size_t>(get<std::uint64_t>(is, "config"));
    }
    c.dropout = get<double>(is, "config");
    c.ln_eps = get<double>(is, "config");
    c.head_dropout = get<std::uint8_t>(is, "config") != 0;
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    if (get<std::uint32_t>(is, "tensor count") != ModelParams::kCount) {
        throw CheckpointError("checkpoint: unexpected tensor count");
    }
    const auto shapes = param_shapes(c);
    auto ts = ck.params.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
        const auto rank = get<std::uint32_t>(is, ModelParams::kNames[i]);
        Shape s(rank);
        for (auto& d : s) d = static_cast<std::size_t>(get<std::uint64_t>(is, ModelParams::kNames[i]));
        if (s != shapes[i]) {
            throw CheckpointError(std::string("checkpoint: ") + ModelParams::kNames[i] + " has shape " +
                                  to_string(s) + ", config implies " + to_string(shapes[i]));
        }
        Tensor t(s);
        if (!is.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.size() * sizeof(double)))) {
            throw CheckpointError(std::string("checkpoint truncated in ") + ModelParams::kNames[i]);
        }
        *ts[i] = std::move(t);
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    write_checkpoint(os, cfg, p);
    if (!os) throw CheckpointError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    return read_checkpoint(is);
}

}  // namespace stgcn

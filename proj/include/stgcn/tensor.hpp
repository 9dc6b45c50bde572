#pragma once

// Minimal define-by-run reverse-mode differentiation over dense f64 tensors.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node id). Primitives are dispatched through
// Tape::apply; the free functions below are thin typed wrappers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stgcn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Row-major dense buffer. product(shape) == data.size() always holds.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor identity(std::size_t n) {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool operator==(const Tensor&) const = default;
};

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    MatMul,
    Sigmoid,
    Relu,
    Sqrt,
    Conv1dValid,
    SliceLast,
    Reshape,
    MeanAxis,
    VarAxis,
    ExpandTrailing,
    ExpandLeading,
    Sum,
    SoftmaxCrossEntropy,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::MatMul: return "matmul";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Relu: return "relu";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Conv1dValid: return "conv1d_valid";
        case OpKind::SliceLast: return "slice_last";
        case OpKind::Reshape: return "reshape";
        case OpKind::MeanAxis: return "mean_axis";
        case OpKind::VarAxis: return "var_axis";
        case OpKind::ExpandTrailing: return "expand_trailing";
        case OpKind::ExpandLeading: return "expand_leading";
        case OpKind::Sum: return "sum";
        case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    }
    return "?";
}

/// Per-op attributes. Only the fields an op documents are read.
struct OpAttrs {
    std::size_t axis = 0;   // MeanAxis, VarAxis
    std::size_t begin = 0;  // SliceLast
    std::size_t end = 0;    // SliceLast
    Shape shape;            // Reshape, ExpandTrailing, ExpandLeading
    double scalar = 0.0;    // AddScalar, MulScalar
    std::size_t label = 0;  // SoftmaxCrossEntropy
};

class Tape;
using NodeId = std::size_t;

class Var {
public:
    Var() = default;
    Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

    Tape* tape() const { return tape_; }
    NodeId id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    const std::vector<double>& grad() const;

private:
    Tape* tape_ = nullptr;
    NodeId id_ = 0;
};

class Tape {
public:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        Tensor value;
        std::vector<double> grad;
        std::vector<double> saved;  // op-specific context (softmax probs, ...)
        bool requires_grad = false;
    };

    Var leaf(Tensor&& value, bool requires_grad = true) {
        Node& n = acquire(OpKind::Leaf);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return Var(this, count_ - 1);
    }

    /// Copies value into recycled storage.
    Var leaf(const Tensor& value, bool requires_grad = true) {
        return leaf(value.shape, value.data, requires_grad);
    }

    /// Leaf holding values under the given shape.
    Var leaf(const Shape& shape, std::span<const double> values, bool requires_grad) {
        if (values.size() != numel(shape)) {
            throw ShapeError("leaf: shape " + to_string(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        if (count_ == nodes_.size()) {
            // acquire() reallocates; the arguments may live in a node.
            return leaf(Tensor(shape, std::vector<double>(values.begin(), values.end())), requires_grad);
        }
        Node& n = acquire(OpKind::Leaf);
        n.value.shape = shape;
        n.value.data.assign(values.begin(), values.end());
        n.requires_grad = requires_grad;
        return Var(this, count_ - 1);
    }

    /// Constant leaf filled element by element from gen().
    template <typename Gen>
    Var constant_generated(Shape shape, Gen&& gen) {
        Node& n = acquire(OpKind::Leaf);
        n.value.shape = std::move(shape);
        n.value.data.resize(numel(n.value.shape));
        for (auto& v : n.value.data) v = gen();
        return Var(this, count_ - 1);
    }

    Var constant(Tensor&& value) { return leaf(std::move(value), false); }
    Var constant(const Tensor& value) { return leaf(value, false); }

    /// Records op_kind applied to inputs. Throws ShapeError naming the op on a
    /// shape mismatch.
    Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});
    Var apply(OpKind kind, std::initializer_list<Var> inputs, const OpAttrs& attrs = {}) {
        return apply(kind, std::span<const Var>(inputs.begin(), inputs.size()), attrs);
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// sweeps; call zero_grad() between independent ones.
    void backward(const Var& loss);
    void zero_grad() {
        for (std::size_t i = 0; i < count_; ++i) std::fill(nodes_[i].grad.begin(), nodes_[i].grad.end(), 0.0);
    }

    /// Forgets every node but keeps their buffers for reuse. Vars obtained
    /// before the call are invalidated.
    void clear() { count_ = 0; }

    const Node& node(NodeId id) const {
        if (id >= count_) throw std::out_of_range("tape: stale node id");
        return nodes_[id];
    }
    std::size_t size() const { return count_; }

private:
    Node& at(NodeId id) { return nodes_[id]; }

    Node& acquire(OpKind kind) {
        if (count_ == nodes_.size()) nodes_.emplace_back();
        Node& n = nodes_[count_++];
        n.kind = kind;
        n.inputs.clear();
        n.attrs = OpAttrs{};
        n.grad.clear();
        n.requires_grad = false;
        return n;
    }

    // Reshapes n's value buffer, zero-filled, reusing its capacity.
    static Tensor& reset_value(Node& n, const Shape& shape) {
        n.value.shape = shape;
        n.value.data.assign(numel(shape), 0.0);
        return n.value;
    }
    void forward_node(Node& n);
    void backward_node(NodeId id);
    static std::vector<double>& ensure_grad(Node& n) {
        if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    std::vector<Node> nodes_;
    std::size_t count_ = 0;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline const std::vector<double>& Var::grad() const { return tape_->node(id_).grad; }

namespace detail {

[[noreturn]] inline void shape_fail(OpKind k, const std::string& expected, const Shape& actual) {
    throw ShapeError(std::string(op_name(k)) + ": expected " + expected + ", got " +
                     to_string(actual));
}

inline void require_arity(OpKind k, std::size_t got, std::size_t want) {
    if (got != want) {
        throw ShapeError(std::string(op_name(k)) + ": expected " + std::to_string(want) +
                         " inputs, got " + std::to_string(got));
    }
}

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit a;
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    a.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

// Canonical [N, L, C] view of a conv input and [K, Ci, Co] view of its kernel.
// Rank-1 sequences and kernels are treated as single-node, single-channel.
struct ConvDims {
    std::size_t nodes, len, cin, k, cout;
    bool rank1;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w) {
    if (x.size() == 1 && w.size() == 1) {
        return {1, x[0], 1, w[0], 1, true};
    }
    if (x.size() != 3 || w.size() != 3) {
        detail::shape_fail(OpKind::Conv1dValid,
                           "input [N, L, Ci] with kernel [K, Ci, Co] (or rank-1 pair); kernel " +
                               to_string(w) + ", input",
                           x);
    }
    if (w[1] != x[2]) {
        detail::shape_fail(OpKind::Conv1dValid,
                           "kernel input channels " + std::to_string(x[2]) + ", kernel", w);
    }
    return {x[0], x[1], x[2], w[0], w[2], false};
}

}  // namespace detail

inline Var Tape::apply(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
    using detail::shape_fail;
    if (kind == OpKind::Leaf) throw std::invalid_argument("apply: use Tape::leaf for leaves");
    for (const auto& v : in) {
        if (v.tape() != this || v.id() >= count_) {
            throw std::invalid_argument(std::string(op_name(kind)) + ": input from another tape");
        }
    }
    // acquire() may grow nodes_, so input references are taken afterwards.
    Node& n = acquire(kind);
    n.attrs = attrs;
    for (const auto& v : in) {
        n.inputs.push_back(v.id());
        n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    const NodeId self = count_ - 1;
    try {
        forward_node(n);
    } catch (...) {
        --count_;
        throw;
    }
    return Var(this, self);
}

inline void Tape::forward_node(Node& n) {
    using detail::shape_fail;
    const OpKind kind = n.kind;
    const OpAttrs& attrs = n.attrs;
    auto val = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
    auto binary = [&](auto op) {
        detail::require_arity(kind, n.inputs.size(), 2);
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        if (a.shape != b.shape) shape_fail(kind, to_string(a.shape), b.shape);
        Tensor& out = reset_value(n, a.shape);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    };
    auto unary = [&](auto op) {
        detail::require_arity(kind, n.inputs.size(), 1);
        const Tensor& a = val(0);
        Tensor& out = reset_value(n, a.shape);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i]);
    };

    switch (kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Add: binary([](double x, double y) { return x + y; }); break;
        case OpKind::Sub: binary([](double x, double y) { return x - y; }); break;
        case OpKind::Mul: binary([](double x, double y) { return x * y; }); break;
        case OpKind::Div: binary([](double x, double y) { return x / y; }); break;
        case OpKind::AddScalar: {
            const double c = attrs.scalar;
            unary([c](double x) { return x + c; });
            break;
        }
        case OpKind::MulScalar: {
            const double c = attrs.scalar;
            unary([c](double x) { return x * c; });
            break;
        }
        case OpKind::Sigmoid:
            // Split by sign so exp never overflows.
            unary([](double x) {
                return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            });
            break;
        // NaN passes through so divergence stays visible downstream.
        case OpKind::Relu: unary([](double x) { return x < 0 ? 0.0 : x; }); break;
        case OpKind::Sqrt: unary([](double x) { return std::sqrt(x); }); break;

        case OpKind::MatMul: {
            detail::require_arity(kind, n.inputs.size(), 2);
            const Tensor& a = val(0);
            const Tensor& b = val(1);
            if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
                shape_fail(kind, "[m, k] x [k, n] with lhs " + to_string(a.shape) + ", rhs",
                           b.shape);
            }
            const std::size_t m = a.shape[0], kk = a.shape[1], nn = b.shape[1];
            Tensor& out = reset_value(n, Shape{m, nn});
            for (std::size_t i = 0; i < m; ++i) {
                double* orow = &out.data[i * nn];
                for (std::size_t p = 0; p < kk; ++p) {
                    const double av = a.data[i * kk + p];
                    if (av == 0.0) continue;
                    const double* brow = &b.data[p * nn];
                    for (std::size_t j = 0; j < nn; ++j) orow[j] += av * brow[j];
                }
            }
            break;
        }

        case OpKind::Conv1dValid: {
            detail::require_arity(kind, n.inputs.size(), 2);
            const Tensor& x = val(0);
            const Tensor& w = val(1);
            const auto d = detail::conv_dims(x.shape, w.shape);
            if (d.k == 0 || d.len < d.k) {
                shape_fail(kind, "sequence length >= kernel length " + std::to_string(d.k) +
                                     ", input",
                           x.shape);
            }
            const std::size_t out_len = d.len - d.k + 1;
            Tensor& out = reset_value(n, d.rank1 ? Shape{out_len} : Shape{d.nodes, out_len, d.cout});
            for (std::size_t nd = 0; nd < d.nodes; ++nd) {
                for (std::size_t t = 0; t < out_len; ++t) {
                    double* o = &out.data[(nd * out_len + t) * d.cout];
                    for (std::size_t tau = 0; tau < d.k; ++tau) {
                        const double* xs = &x.data[(nd * d.len + t + tau) * d.cin];
                        const double* ws = &w.data[tau * d.cin * d.cout];
                        for (std::size_t c = 0; c < d.cin; ++c) {
                            const double xv = xs[c];
                            const double* wr = ws + c * d.cout;
                            for (std::size_t co = 0; co < d.cout; ++co) o[co] += xv * wr[co];
                        }
                    }
                }
            }
            break;
        }

        case OpKind::SliceLast: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            if (a.rank() == 0 || attrs.begin >= attrs.end || attrs.end > a.shape.back()) {
                shape_fail(kind,
                           "last dim >= " + std::to_string(attrs.end) + " and begin < end, input",
                           a.shape);
            }
            const std::size_t c = a.shape.back();
            const std::size_t w = attrs.end - attrs.begin;
            const std::size_t rows = a.size() / c;
            Shape s = a.shape;
            s.back() = w;
            Tensor& out = reset_value(n, s);
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(&a.data[r * c + attrs.begin], w, &out.data[r * w]);
            }
            break;
        }

        case OpKind::Reshape: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            if (numel(attrs.shape) != a.size()) {
                shape_fail(kind, std::to_string(numel(attrs.shape)) + " elements for " +
                                     to_string(attrs.shape) + ", input",
                           a.shape);
            }
            n.value.shape = attrs.shape;
            n.value.data.assign(a.data.begin(), a.data.end());
            break;
        }

        case OpKind::MeanAxis:
        case OpKind::VarAxis: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            if (attrs.axis >= a.rank() || a.rank() < 2) {
                shape_fail(kind, "rank >= 2 with axis " + std::to_string(attrs.axis) + ", input",
                           a.shape);
            }
            const auto sp = detail::split_axis(a.shape, attrs.axis);
            Shape s = a.shape;
            s.erase(s.begin() + static_cast<std::ptrdiff_t>(attrs.axis));
            std::vector<double>& means = n.saved;
            means.assign(sp.outer * sp.inner, 0.0);
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const double* src = &a.data[(o * sp.len + l) * sp.inner];
                    for (std::size_t i = 0; i < sp.inner; ++i) means[o * sp.inner + i] += src[i];
                }
            }
            for (auto& m : means) m /= static_cast<double>(sp.len);
            Tensor& out = reset_value(n, s);
            if (kind == OpKind::MeanAxis) {
                std::copy(means.begin(), means.end(), out.data.begin());
            } else {
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    for (std::size_t l = 0; l < sp.len; ++l) {
                        const double* src = &a.data[(o * sp.len + l) * sp.inner];
                        for (std::size_t i = 0; i < sp.inner; ++i) {
                            const double dlt = src[i] - means[o * sp.inner + i];
                            out.data[o * sp.inner + i] += dlt * dlt;
                        }
                    }
                }
                for (auto& v : out.data) v /= static_cast<double>(sp.len);
            }
            break;
        }

        case OpKind::ExpandTrailing:
        case OpKind::ExpandLeading: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            const Shape& target = attrs.shape;
            const bool trailing = kind == OpKind::ExpandTrailing;
            bool ok = a.rank() <= target.size();
            if (ok) {
                const std::size_t off = trailing ? 0 : target.size() - a.rank();
                ok = std::equal(a.shape.begin(), a.shape.end(), target.begin() + static_cast<std::ptrdiff_t>(off));
            }
            if (!ok) {
                shape_fail(kind,
                           std::string(trailing ? "a prefix" : "a suffix") + " of " +
                               to_string(target) + ", input",
                           a.shape);
            }
            Tensor& out = reset_value(n, target);
            const std::size_t src = a.size();
            const std::size_t rep = out.size() / std::max<std::size_t>(src, 1);
            if (trailing) {
                for (std::size_t i = 0; i < src; ++i) std::fill_n(&out.data[i * rep], rep, a[i]);
            } else {
                for (std::size_t r = 0; r < rep; ++r) std::copy_n(a.data.data(), src, &out.data[r * src]);
            }
            break;
        }

        case OpKind::Sum: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            double s = 0.0;
            for (double v : a.data) s += v;
            reset_value(n, Shape{1})[0] = s;
            break;
        }

        case OpKind::SoftmaxCrossEntropy: {
            detail::require_arity(kind, n.inputs.size(), 1);
            const Tensor& a = val(0);
            if (a.rank() != 1 || a.size() == 0) shape_fail(kind, "logits [C]", a.shape);
            if (attrs.label >= a.size()) {
                throw std::out_of_range("softmax_cross_entropy: label " +
                                        std::to_string(attrs.label) + " outside [0, " +
                                        std::to_string(a.size()) + ")");
            }
            const double mx = *std::max_element(a.data.begin(), a.data.end());
            std::vector<double>& p = n.saved;
            p.assign(a.size(), 0.0);
            double z = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                p[i] = std::exp(a[i] - mx);
                z += p[i];
            }
            for (auto& v : p) v /= z;
            reset_value(n, Shape{1})[0] = mx + std::log(z) - a[attrs.label];
            break;
        }
    }
}

inline void Tape::backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss not on this tape");
    if (loss.id() >= count_) throw std::invalid_argument("backward: stale loss handle");
    Node& root = at(loss.id());
    if (root.value.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + to_string(root.value.shape));
    }
    // Leaves accumulate across sweeps; interior nodes restart from zero.
    for (std::size_t i = 0; i < count_; ++i) {
        auto& g = ensure_grad(nodes_[i]);
        if (nodes_[i].kind != OpKind::Leaf) std::fill(g.begin(), g.end(), 0.0);
    }
    root.grad[0] += 1.0;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
        if (nodes_[id].kind != OpKind::Leaf && nodes_[id].requires_grad) backward_node(id);
    }
}

inline void Tape::backward_node(NodeId id) {
    Node& n = nodes_[id];
    const std::vector<double>& g = n.grad;
    const Tensor& y = n.value;
    auto in = [&](std::size_t i) -> Node& { return nodes_[n.inputs[i]]; };
    auto wants = [&](std::size_t i) { return in(i).requires_grad; };

    switch (n.kind) {
        case OpKind::Leaf:
            break;

        case OpKind::Add:
        case OpKind::Sub: {
            const double sb = n.kind == OpKind::Add ? 1.0 : -1.0;
            if (wants(0)) {
                auto& ga = ensure_grad(in(0));
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants(1)) {
                auto& gb = ensure_grad(in(1));
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sb * g[i];
            }
            break;
        }

        case OpKind::Mul: {
            const auto& a = in(0).value;
            const auto& b = in(1).value;
            if (wants(0)) {
                auto& ga = ensure_grad(in(0));
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (wants(1)) {
                auto& gb = ensure_grad(in(1));
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
            break;
        }

        case OpKind::Div: {
            const auto& a = in(0).value;
            const auto& b = in(1).value;
            if (wants(0)) {
                auto& ga = ensure_grad(in(0));
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
            }
            if (wants(1)) {
                auto& gb = ensure_grad(in(1));
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
            }
            break;
        }

        case OpKind::AddScalar:
        case OpKind::MulScalar:
        case OpKind::Sigmoid:
        case OpKind::Relu:
        case OpKind::Sqrt: {
            auto& ga = ensure_grad(in(0));
            const auto& x = in(0).value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                switch (n.kind) {
                    case OpKind::AddScalar: ga[i] += g[i]; break;
                    case OpKind::MulScalar: ga[i] += g[i] * n.attrs.scalar; break;
                    case OpKind::Sigmoid: ga[i] += g[i] * y[i] * (1.0 - y[i]); break;
                    case OpKind::Relu: ga[i] += x[i] > 0 ? g[i] : 0.0; break;
                    default: ga[i] += g[i] / (2.0 * y[i]); break;
                }
            }
            break;
        }

        case OpKind::MatMul: {
            const auto& a = in(0).value;
            const auto& b = in(1).value;
            const std::size_t m = a.shape[0], kk = a.shape[1], nn = b.shape[1];
            if (wants(0)) {
                auto& ga = ensure_grad(in(0));
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < kk; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < nn; ++j) s += g[i * nn + j] * b.data[p * nn + j];
                        ga[i * kk + p] += s;
                    }
                }
            }
            if (wants(1)) {
                auto& gb = ensure_grad(in(1));
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < kk; ++p) {
                        const double av = a.data[i * kk + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < nn; ++j) gb[p * nn + j] += av * g[i * nn + j];
                    }
                }
            }
            break;
        }

        case OpKind::Conv1dValid: {
            const auto& x = in(0).value;
            const auto& w = in(1).value;
            const auto d = detail::conv_dims(x.shape, w.shape);
            const std::size_t out_len = d.len - d.k + 1;
            const bool gx_on = wants(0), gw_on = wants(1);
            std::vector<double>* gx = gx_on ? &ensure_grad(in(0)) : nullptr;
            std::vector<double>* gw = gw_on ? &ensure_grad(in(1)) : nullptr;
            for (std::size_t nd = 0; nd < d.nodes; ++nd) {
                for (std::size_t t = 0; t < out_len; ++t) {
                    const double* go = &g[(nd * out_len + t) * d.cout];
                    for (std::size_t tau = 0; tau < d.k; ++tau) {
                        const std::size_t xoff = (nd * d.len + t + tau) * d.cin;
                        const std::size_t woff = tau * d.cin * d.cout;
                        for (std::size_t c = 0; c < d.cin; ++c) {
                            double acc = 0.0;
                            const double xv = x.data[xoff + c];
                            for (std::size_t co = 0; co < d.cout; ++co) {
                                const std::size_t wi = woff + c * d.cout + co;
                                acc += go[co] * w.data[wi];
                                if (gw_on) (*gw)[wi] += go[co] * xv;
                            }
                            if (gx_on) (*gx)[xoff + c] += acc;
                        }
                    }
                }
            }
            break;
        }

        case OpKind::SliceLast: {
            auto& ga = ensure_grad(in(0));
            const std::size_t c = in(0).value.shape.back();
            const std::size_t w = n.attrs.end - n.attrs.begin;
            const std::size_t rows = g.size() / w;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < w; ++j) ga[r * c + n.attrs.begin + j] += g[r * w + j];
            }
            break;
        }

        case OpKind::Reshape: {
            auto& ga = ensure_grad(in(0));
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            break;
        }

        case OpKind::MeanAxis:
        case OpKind::VarAxis: {
            auto& ga = ensure_grad(in(0));
            const auto& a = in(0).value;
            const auto sp = detail::split_axis(a.shape, n.attrs.axis);
            const double inv = 1.0 / static_cast<double>(sp.len);
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t base = (o * sp.len + l) * sp.inner;
                    for (std::size_t i = 0; i < sp.inner; ++i) {
                        const std::size_t r = o * sp.inner + i;
                        if (n.kind == OpKind::MeanAxis) {
                            ga[base + i] += g[r] * inv;
                        } else {
                            ga[base + i] += g[r] * 2.0 * (a.data[base + i] - n.saved[r]) * inv;
                        }
                    }
                }
            }
            break;
        }

        case OpKind::ExpandTrailing:
        case OpKind::ExpandLeading: {
            auto& ga = ensure_grad(in(0));
            const std::size_t src = ga.size();
            const std::size_t rep = g.size() / std::max<std::size_t>(src, 1);
            const bool trailing = n.kind == OpKind::ExpandTrailing;
            for (std::size_t i = 0; i < g.size(); ++i) ga[trailing ? i / rep : i % src] += g[i];
            break;
        }

        case OpKind::Sum: {
            auto& ga = ensure_grad(in(0));
            for (auto& v : ga) v += g[0];
            break;
        }

        case OpKind::SoftmaxCrossEntropy: {
            auto& ga = ensure_grad(in(0));
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g[0] * (n.saved[i] - (i == n.attrs.label ? 1.0 : 0.0));
            }
            break;
        }
    }
}

// Typed wrappers over Tape::apply.

inline Var add(const Var& a, const Var& b) { return a.tape()->apply(OpKind::Add, {a, b}); }
inline Var sub(const Var& a, const Var& b) { return a.tape()->apply(OpKind::Sub, {a, b}); }
inline Var mul(const Var& a, const Var& b) { return a.tape()->apply(OpKind::Mul, {a, b}); }
inline Var div(const Var& a, const Var& b) { return a.tape()->apply(OpKind::Div, {a, b}); }
inline Var matmul(const Var& a, const Var& b) { return a.tape()->apply(OpKind::MatMul, {a, b}); }
inline Var sigmoid(const Var& a) { return a.tape()->apply(OpKind::Sigmoid, {a}); }
inline Var relu(const Var& a) { return a.tape()->apply(OpKind::Relu, {a}); }
inline Var sqrt(const Var& a) { return a.tape()->apply(OpKind::Sqrt, {a}); }
inline Var sum(const Var& a) { return a.tape()->apply(OpKind::Sum, {a}); }

inline Var add_scalar(const Var& a, double s) {
    OpAttrs at;
    at.scalar = s;
    return a.tape()->apply(OpKind::AddScalar, {a}, at);
}

inline Var mul_scalar(const Var& a, double s) {
    OpAttrs at;
    at.scalar = s;
    return a.tape()->apply(OpKind::MulScalar, {a}, at);
}

/// Valid (unpadded) cross-correlation along time. x: [N, L, Ci], w: [K, Ci, Co]
/// gives [N, L-K+1, Co]; rank-1 x: [L], w: [K] gives [L-K+1].
inline Var conv1d_valid(const Var& x, const Var& w) {
    return x.tape()->apply(OpKind::Conv1dValid, {x, w});
}

inline Var slice_last(const Var& a, std::size_t begin, std::size_t end) {
    OpAttrs at;
    at.begin = begin;
    at.end = end;
    return a.tape()->apply(OpKind::SliceLast, {a}, at);
}

inline Var reshape(const Var& a, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return a.tape()->apply(OpKind::Reshape, {a}, at);
}

inline Var mean_axis(const Var& a, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return a.tape()->apply(OpKind::MeanAxis, {a}, at);
}

/// Population variance along axis.
inline Var var_axis(const Var& a, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return a.tape()->apply(OpKind::VarAxis, {a}, at);
}

/// Repeat a along new trailing dims: [N, T] -> [N, T, C].
inline Var expand_trailing(const Var& a, Shape target) {
    OpAttrs at;
    at.shape = std::move(target);
    return a.tape()->apply(OpKind::ExpandTrailing, {a}, at);
}

/// Repeat a along new leading dims: [C] -> [N, T, C].
inline Var expand_leading(const Var& a, Shape target) {
    OpAttrs at;
    at.shape = std::move(target);
    return a.tape()->apply(OpKind::ExpandLeading, {a}, at);
}

/// logsumexp(logits) - logits[label], max-shifted.
inline Var softmax_cross_entropy(const Var& logits, std::size_t label) {
    OpAttrs at;
    at.label = label;
    return logits.tape()->apply(OpKind::SoftmaxCrossEntropy, {logits}, at);
}

/// Builds a scalar from a leaf on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Central-difference check of backward(): returns
/// max_i |analytic_i - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic_i|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
    std::vector<double> analytic;
    {
        Tape tape;
        Var leaf = tape.leaf(x, true);
        Var loss = f(tape, leaf);
        tape.backward(loss);
        analytic = leaf.grad();
    }
    auto eval = [&](const Tensor& probe) {
        Tape tape;
        Var leaf = tape.leaf(probe, true);
        return f(tape, leaf).value()[0];
    };
    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double fp = eval(probe);
        probe[i] = x[i] - h;
        const double fm = eval(probe);
        probe[i] = x[i];
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace stgcn

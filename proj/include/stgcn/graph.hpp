#pragma once

// Muscle-network graphs built from the channel correlations of a window.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgcn/signal.hpp"
#include "stgcn/tensor.hpp"

namespace stgcn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class CorrelationMode {
    Absolute,      // |rho|
    PositiveOnly,  // max(rho, 0); keeps weights non-negative without folding sign
};

struct MuscleGraph {
    std::size_t k = 0;
    Matrix adjacency;    // A: correlation weights, zero diagonal
    Matrix weights;      // W: k-NN pruned, symmetric
    Matrix laplacian;    // L = I - D^-1/2 W D^-1/2
    Matrix propagation;  // S = D~^-1/2 (W + I) D~^-1/2

    std::size_t nodes() const { return static_cast<std::size_t>(adjacency.rows()); }
};

/// Correlation adjacency over the columns of samples ([N, T] tensor). A constant
/// channel has correlation 0 with everything.
inline Matrix pearson_adjacency(const Tensor& samples,
                                CorrelationMode mode = CorrelationMode::Absolute) {
    if (samples.rank() != 2 || samples.shape[1] < 2) {
        throw ShapeError("pearson_adjacency: expected [N, T] with T >= 2, got " +
                         to_string(samples.shape));
    }
    const std::size_t n = samples.shape[0], len = samples.shape[1];
    Matrix centered(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(len));
    std::vector<double> sd(n);
    for (std::size_t c = 0; c < n; ++c) {
        const double* row = &samples.data[c * len];
        const auto [mean, s] = detail::row_moments(row, len);
        sd[c] = s;
        for (std::size_t t = 0; t < len; ++t) {
            centered(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) = row[t] - mean;
        }
    }
    const Matrix cov = centered * centered.transpose() / static_cast<double>(len);
    Matrix a = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
            const double si = sd[static_cast<std::size_t>(i)];
            const double sj = sd[static_cast<std::size_t>(j)];
            double r = (si == 0.0 || sj == 0.0) ? 0.0 : cov(i, j) / (si * sj);
            r = mode == CorrelationMode::Absolute ? std::abs(r) : std::max(r, 0.0);
            a(i, j) = a(j, i) = std::min(r, 1.0);
        }
    }
    return a;
}

inline Matrix pearson_adjacency(const Window& w, CorrelationMode mode = CorrelationMode::Absolute) {
    return pearson_adjacency(w.data, mode);
}

/// Adjacency from the per-channel concatenation of several windows (one graph
/// for a whole training split).
inline Matrix pearson_adjacency(std::span<const Window> windows,
                                CorrelationMode mode = CorrelationMode::Absolute) {
    if (windows.empty()) throw std::invalid_argument("pearson_adjacency: no windows");
    const std::size_t n = windows.front().channels();
    std::size_t total = 0;
    for (const auto& w : windows) {
        if (w.channels() != n) throw ShapeError("pearson_adjacency: channel count differs");
        total += w.length();
    }
    Tensor cat(Shape{n, total});
    std::size_t off = 0;
    for (const auto& w : windows) {
        for (std::size_t c = 0; c < n; ++c) {
            std::copy_n(&w.data.data[c * w.length()], w.length(), &cat.data[c * total + off]);
        }
        off += w.length();
    }
    return pearson_adjacency(cat, mode);
}

/// Keeps the k largest off-diagonal entries of each row (ties go to the smaller
/// column index), then symmetrizes with an element-wise max.
inline Matrix knn_prune(const Matrix& a, std::size_t k) {
    const auto n = static_cast<std::size_t>(a.rows());
    if (a.rows() != a.cols()) throw ShapeError("knn_prune: adjacency must be square");
    if (k < 1 || k + 1 > n) {
        throw std::out_of_range("knn_prune: k must lie in [1, " + std::to_string(n - 1) +
                                "], got " + std::to_string(k));
    }
    Matrix rowwise = Matrix::Zero(a.rows(), a.cols());
    std::vector<Eigen::Index> order;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        order.clear();
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            if (j != i) order.push_back(j);
        }
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end(), [&](Eigen::Index x, Eigen::Index y) {
                              return a(i, x) != a(i, y) ? a(i, x) > a(i, y) : x < y;
                          });
        for (std::size_t r = 0; r < k; ++r) rowwise(i, order[r]) = a(i, order[r]);
    }
    return rowwise.cwiseMax(rowwise.transpose());
}

namespace detail {

inline Vector inv_sqrt_degrees(const Matrix& w) {
    Vector d = w.rowwise().sum();
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = d(i) > 0.0 ? 1.0 / std::sqrt(d(i)) : 0.0;
    return d;
}

}  // namespace detail

/// I - D^-1/2 W D^-1/2; isolated nodes get D^-1/2 = 0, i.e. an identity row.
inline Matrix normalized_laplacian(const Matrix& w) {
    const Vector dinv = detail::inv_sqrt_degrees(w);
    Matrix l = -(dinv.asDiagonal() * w * dinv.asDiagonal());
    l.diagonal().array() += 1.0;
    return l;
}

/// D~^-1/2 (W + I) D~^-1/2. Self-loops keep every degree >= 1.
inline Matrix renormalized_propagation(const Matrix& w) {
    Matrix wt = w;
    wt.diagonal().array() += 1.0;
    const Vector dinv = detail::inv_sqrt_degrees(wt);
    return dinv.asDiagonal() * wt * dinv.asDiagonal();
}

inline MuscleGraph build_graph(const Matrix& adjacency, std::size_t k) {
    MuscleGraph g;
    g.k = k;
    g.adjacency = adjacency;
    g.weights = knn_prune(adjacency, k);
    g.laplacian = normalized_laplacian(g.weights);
    g.propagation = renormalized_propagation(g.weights);
    return g;
}

inline MuscleGraph build_graph(const Window& w, std::size_t k,
                               CorrelationMode mode = CorrelationMode::Absolute) {
    return build_graph(pearson_adjacency(w, mode), k);
}

inline bool is_symmetric(const Matrix& m, double tol = 1e-12) {
    if (m.rows() != m.cols()) return false;
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

/// U diag(response(lambda)) U^T x from a full symmetric eigendecomposition.
/// Reference implementation; O(N^3).
inline Vector spectral_filter(const Matrix& l, const std::function<double(double)>& response,
                              const Vector& x) {
    if (!is_symmetric(l)) throw std::invalid_argument("spectral_filter: operator is not symmetric");
    if (x.size() != l.rows()) throw ShapeError("spectral_filter: signal length != node count");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(l);
    if (eig.info() != Eigen::Success) {
        throw std::runtime_error("spectral_filter: eigendecomposition failed");
    }
    Vector h = eig.eigenvalues();
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = response(h(i));
    const Matrix& u = eig.eigenvectors();
    return u * (h.asDiagonal() * (u.transpose() * x));
}

/// sum_k thetas[k] T_k(2L/lambda_max - I) x via the three-term recurrence on
/// vectors.
inline Vector chebyshev_filter(const Matrix& l, std::span<const double> thetas,
                               double lambda_max, const Vector& x) {
    if (!(lambda_max > 0.0)) throw std::invalid_argument("chebyshev_filter: lambda_max <= 0");
    if (thetas.empty()) throw std::invalid_argument("chebyshev_filter: need at least theta_0");
    if (x.size() != l.rows()) throw ShapeError("chebyshev_filter: signal length != node count");
    const double s = 2.0 / lambda_max;
    auto apply_scaled = [&](const Vector& v) -> Vector { return s * (l * v) - v; };

    Vector prev = x;
    Vector out = thetas[0] * prev;
    if (thetas.size() == 1) return out;
    Vector cur = apply_scaled(x);
    out += thetas[1] * cur;
    for (std::size_t k = 2; k < thetas.size(); ++k) {
        Vector next = 2.0 * apply_scaled(cur) - prev;
        out += thetas[k] * next;
        prev = std::move(cur);
        cur = std::move(next);
    }
    return out;
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration on the
/// Rayleigh quotient.
inline double lambda_max(const Matrix& l, double tol = 1e-10, int max_iter = 100000) {
    const Eigen::Index n = l.rows();
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 0.1 * static_cast<double>(i % 7) - 0.03 * i;
    v.normalize();
    double rq = v.dot(l * v);
    for (int it = 0; it < max_iter; ++it) {
        Vector w = l * v;
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        v = w / norm;
        const double next = v.dot(l * v);
        if (std::abs(next - rq) <= tol * std::max(1.0, std::abs(next))) return next;
        rq = next;
    }
    return rq;
}

/// Region index per node. For 128 nodes (two 8x8 grids) each grid is split
/// into 4x4 quadrants, giving R1..R8 with 16 nodes each; otherwise nodes are
/// split into 8 contiguous blocks.
inline std::vector<int> default_regions(std::size_t n) {
    std::vector<int> r(n);
    if (n == 128) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t grid = i / 64, row = (i % 64) / 8, col = i % 8;
            r[i] = static_cast<int>(grid * 4 + (row / 4) * 2 + col / 4);
        }
        return r;
    }
    const std::size_t regions = std::min<std::size_t>(8, std::max<std::size_t>(n, 1));
    const std::size_t per = (n + regions - 1) / regions;
    for (std::size_t i = 0; i < n; ++i) r[i] = static_cast<int>(i / per);
    return r;
}

namespace detail {

inline std::string fmt_weight(double w, const char* spec = "%.17g") {
    char buf[32];
    std::snprintf(buf, sizeof buf, spec, w);
    return buf;
}

}  // namespace detail

/// Graphviz text: nodes filled by region, one undirected edge per nonzero
/// weight with penwidth proportional to the weight.
inline std::string export_dot(const Matrix& weights, std::span<const int> regions,
                              const std::string& header_comment = {}) {
    static constexpr const char* kPalette[] = {"#e41a1c", "#377eb8", "#4daf4a", "#984ea3",
                                               "#ff7f00", "#ffff33", "#a65628", "#f781bf"};
    const auto n = static_cast<std::size_t>(weights.rows());
    if (regions.size() != n) throw std::invalid_argument("export_dot: region map size != nodes");
    std::ostringstream os;
    if (!header_comment.empty()) os << "// " << header_comment << '\n';
    os << "graph muscle_network {\n";
    os << "  node [shape=circle, style=filled];\n";
    for (std::size_t i = 0; i < n; ++i) {
        const int r = regions[i];
        os << "  n" << i << " [label=\"" << i << "\", region=\"R" << (r + 1) << "\", fillcolor=\""
           << kPalette[static_cast<std::size_t>(r) % 8] << "\"];\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double w = weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            if (w == 0.0) continue;
            os << "  n" << i << " -- n" << j << " [weight=" << detail::fmt_weight(w, "%.6f")
               << ", penwidth=" << detail::fmt_weight(5.0 * w, "%.4f") << "];\n";
        }
    }
    os << "}\n";
    return os.str();
}

/// `node_i,node_j,weight` rows over the upper triangle. With include_zero every
/// one of the N(N-1)/2 pairs is listed.
inline std::string export_csv(const Matrix& weights, bool include_zero,
                              const std::string& header_comment = {}) {
    std::ostringstream os;
    if (!header_comment.empty()) os << "# " << header_comment << '\n';
    os << "node_i,node_j,weight\n";
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < weights.cols(); ++j) {
            if (!include_zero && weights(i, j) == 0.0) continue;
            os << i << ',' << j << ',' << detail::fmt_weight(weights(i, j)) << '\n';
        }
    }
    return os.str();
}

/// Dense Eigen matrix as a row-major tensor.
inline Tensor to_tensor(const Matrix& m) {
    Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            t.data[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
        }
    }
    return t;
}

}  // namespace stgcn

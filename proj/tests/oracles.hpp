#pragma once

// Reference implementations written directly from the definitions, sharing
// no code with the library. Accumulation in long double where it matters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "stgcn/tensor.hpp"

namespace oracle {

using stgcn::Shape;
using stgcn::Tensor;

inline Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(s);
    for (auto& v : t.data) v = d(rng);
    return t;
}

/// a [m,k] * b [k,n] by triple loop.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            long double acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += (long double)a.data[i * k + p] * b.data[p * n + j];
            c.data[i * n + j] = (double)acc;
        }
    }
    return c;
}

/// Sliding dot product: x [N,L,Ci], w [K,Ci,Co] -> [N,L-K+1,Co].
inline Tensor conv_valid(const Tensor& x, const Tensor& w) {
    const std::size_t n = x.shape[0], l = x.shape[1], ci = x.shape[2];
    const std::size_t k = w.shape[0], co = w.shape[2], t_out = l - k + 1;
    Tensor y(Shape{n, t_out, co});
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t t = 0; t < t_out; ++t)
            for (std::size_t o = 0; o < co; ++o) {
                long double acc = 0;
                for (std::size_t d = 0; d < k; ++d)
                    for (std::size_t c = 0; c < ci; ++c)
                        acc += (long double)x.data[(a * l + t + d) * ci + c] * w.data[(d * ci + c) * co + o];
                y.data[(a * t_out + t) * co + o] = (double)acc;
            }
    return y;
}

/// P * sigmoid(Q) over a [N,T,2C] pre-activation.
inline Tensor glu(const Tensor& pq) {
    const std::size_t n = pq.shape[0], t = pq.shape[1], c = pq.shape[2] / 2;
    Tensor y(Shape{n, t, c});
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t s = 0; s < t; ++s)
            for (std::size_t o = 0; o < c; ++o) {
                const double p = pq.data[(a * t + s) * 2 * c + o];
                const double q = pq.data[(a * t + s) * 2 * c + c + o];
                y.data[(a * t + s) * c + o] = p / (1.0 + std::exp(-q));
            }
    return y;
}

/// out[i,t,o] = sum_j sum_c S[i,j] H[j,t,c] Theta[c,o].
inline Tensor graph_conv(const Tensor& s, const Tensor& h, const Tensor& theta) {
    const std::size_t n = h.shape[0], t = h.shape[1], ci = h.shape[2], co = theta.shape[1];
    Tensor y(Shape{n, t, co});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t st = 0; st < t; ++st)
            for (std::size_t o = 0; o < co; ++o) {
                long double acc = 0;
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t c = 0; c < ci; ++c)
                        acc += (long double)s.data[i * n + j] * h.data[(j * t + st) * ci + c] *
                               theta.data[c * co + o];
                y.data[(i * t + st) * co + o] = (double)acc;
            }
    return y;
}

/// Two-pass sample Pearson correlation in long double; 0 for a constant input.
inline double pearson(const double* x, const double* y, std::size_t n) {
    long double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    long double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return (double)(sxy / std::sqrt(sxx * syy));
}

/// logsumexp(z) - z[label] in long double.
inline double cross_entropy(const std::vector<double>& z, std::size_t label) {
    long double mx = *std::max_element(z.begin(), z.end());
    long double s = 0;
    for (double v : z) s += std::exp((long double)v - mx);
    return (double)(mx + std::log(s) - (long double)z[label]);
}

}  // namespace oracle

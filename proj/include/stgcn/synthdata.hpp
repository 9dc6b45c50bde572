#pragma once

// Synthetic labeled windows whose class is carried by which channels move
// together. Each class owns a partition of the nodes into groups plus a sign
// per node; every window draws fresh band-limited latents per group, so
// neither amplitude nor spectrum identifies the class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgcn/graph.hpp"
#include "stgcn/model.hpp"
#include "stgcn/signal.hpp"

namespace stgcn {

struct SynthConfig {
    std::size_t n_classes = 8;
    std::size_t n_nodes = 16;
    std::size_t window_len = 64;
    std::size_t reps = 5;
    std::size_t windows_per_rep = 8;
    std::size_t groups = 4;  // correlated groups per class partition
    double noise_std = 0.3;
    std::uint64_t seed = 1;
    std::uint32_t sample_rate = 2048;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
        if (n_classes < 2) fail("n_classes must be >= 2");
        if (n_nodes < 4) fail("n_nodes must be >= 4");
        if (window_len <= 5) fail("window_len must exceed the temporal kernel (5)");
        if (reps < 1 || windows_per_rep < 1) fail("reps and windows_per_rep must be >= 1");
        if (groups < 2 || groups > n_nodes / 2) fail("groups must lie in [2, n_nodes/2]");
        if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
        if (sample_rate == 0) fail("sample_rate must be > 0");
    }
};

/// Spatial structure of one class.
struct ClassPattern {
    std::vector<int> group;    // node -> group id, canonical (first-seen order)
    std::vector<double> sign;  // node -> +1 / -1
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline double normal01(std::mt19937_64& rng) {
    // Box-Muller; u1 in (0, 1].
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::vector<int> canonical_groups(const std::vector<int>& g) {
    std::map<int, int> relabel;
    std::vector<int> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        auto [it, inserted] = relabel.try_emplace(g[i], static_cast<int>(relabel.size()));
        out[i] = it->second;
    }
    return out;
}

}  // namespace detail

/// Mixes several integers into one seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
    std::uint64_t h = detail::splitmix64(a);
    h = detail::splitmix64(h ^ b);
    h = detail::splitmix64(h ^ c);
    return detail::splitmix64(h ^ d);
}

/// One pattern per class; partitions are rejection-sampled so no two classes
/// share one.
inline std::vector<ClassPattern> make_class_patterns(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5041));
    std::vector<ClassPattern> out;
    const std::size_t n = cfg.n_nodes;
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 10000) throw std::runtime_error("synth: cannot draw distinct partitions");
            std::vector<std::size_t> perm(n);
            for (std::size_t i = 0; i < n; ++i) perm[i] = i;
            for (std::size_t i = n - 1; i > 0; --i) {
                std::swap(perm[i], perm[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1))]);
            }
            std::vector<int> g(n);
            for (std::size_t r = 0; r < n; ++r) {
                g[perm[r]] = static_cast<int>(r * cfg.groups / n);
            }
            g = detail::canonical_groups(g);
            const bool dup = std::any_of(out.begin(), out.end(),
                                         [&](const ClassPattern& p) { return p.group == g; });
            if (dup) continue;
            ClassPattern p;
            p.group = std::move(g);
            p.sign.resize(n);
            for (auto& s : p.sign) s = uniform01(rng) < 0.5 ? -1.0 : 1.0;
            out.push_back(std::move(p));
            break;
        }
    }
    return out;
}

/// Windows ordered by class, then repetition, then index. Values are rounded
/// to f32 so the dataset survives the EMG1 container unchanged.
inline std::vector<Window> generate_synthetic_dataset(const SynthConfig& cfg) {
    const auto patterns = make_class_patterns(cfg);
    const std::size_t n = cfg.n_nodes, len = cfg.window_len;
    std::vector<Window> out;
    out.reserve(cfg.n_classes * cfg.reps * cfg.windows_per_rep);
    std::uint64_t serial = 0;
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        const auto& pat = patterns[c];
        for (std::size_t r = 0; r < cfg.reps; ++r) {
            for (std::size_t w = 0; w < cfg.windows_per_rep; ++w, ++serial) {
                std::mt19937_64 rng(mix_seed(cfg.seed, 0x57494e, c, r * cfg.windows_per_rep + w));
                // Latent per group: three sinusoids below 1/4 of Nyquist
                // (f < 1/8 cycles per sample).
                std::vector<std::vector<double>> latent(cfg.groups, std::vector<double>(len, 0.0));
                for (auto& lat : latent) {
                    for (int m = 0; m < 3; ++m) {
                        const double f = (1.0 / static_cast<double>(len)) +
                                         uniform01(rng) * (0.125 - 1.0 / static_cast<double>(len));
                        const double amp = 0.5 + 0.5 * uniform01(rng);
                        const double phase = 2.0 * std::numbers::pi * uniform01(rng);
                        for (std::size_t t = 0; t < len; ++t) {
                            lat[t] += amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) + phase);
                        }
                    }
                }
                Window win;
                win.data = Tensor(Shape{n, len});
                for (std::size_t i = 0; i < n; ++i) {
                    const auto& lat = latent[static_cast<std::size_t>(pat.group[i])];
                    for (std::size_t t = 0; t < len; ++t) {
                        const double v = pat.sign[i] * lat[t] + cfg.noise_std * detail::normal01(rng);
                        win.data.data[i * len + t] = static_cast<double>(static_cast<float>(v));
                    }
                }
                win.label = static_cast<int>(c);
                win.repetition = static_cast<int>(r);
                win.source_offset = serial * len;
                out.push_back(std::move(win));
            }
        }
    }
    return out;
}

/// Packs equal-length windows back to back into one recording with one
/// annotation per window.
inline EmgRecording to_recording(const std::vector<Window>& windows, std::uint32_t sample_rate) {
    if (windows.empty()) throw std::invalid_argument("to_recording: no windows");
    const std::size_t n = windows.front().channels(), len = windows.front().length();
    EmgRecording rec;
    rec.channels = static_cast<std::uint32_t>(n);
    rec.sample_rate = sample_rate;
    rec.samples = windows.size() * len;
    rec.data.assign(n * rec.samples, 0.0);
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const auto& win = windows[w];
        if (win.channels() != n || win.length() != len) {
            throw ShapeError("to_recording: windows differ in shape");
        }
        for (std::size_t c = 0; c < n; ++c) {
            std::copy_n(&win.data.data[c * len], len, &rec.data[c * rec.samples + w * len]);
        }
        rec.annotations.push_back({w * len, (w + 1) * len, win.label, win.repetition});
    }
    return rec;
}

/// Upper-triangular adjacency entries as a feature vector.
inline std::vector<double> adjacency_features(const Window& w) {
    const Matrix a = pearson_adjacency(w);
    std::vector<double> f;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < a.cols(); ++j) f.push_back(a(i, j));
    }
    return f;
}

/// Training-free learnability check: nearest class centroid of adjacency
/// features, fit on every repetition except test_repetition and scored on it.
/// test_repetition < 0 selects the highest repetition present.
inline double oracle_separability_check(const std::vector<Window>& windows, int test_repetition = -1) {
    if (windows.empty()) throw std::invalid_argument("oracle_separability_check: no windows");
    if (test_repetition < 0) {
        for (const auto& w : windows) test_repetition = std::max(test_repetition, w.repetition);
    }
    std::map<int, std::pair<std::vector<double>, std::size_t>> centroids;
    std::vector<std::pair<std::vector<double>, int>> tests;
    for (const auto& w : windows) {
        auto f = adjacency_features(w);
        if (w.repetition == test_repetition) {
            tests.emplace_back(std::move(f), w.label);
            continue;
        }
        auto& [sum, count] = centroids[w.label];
        if (sum.empty()) sum.assign(f.size(), 0.0);
        for (std::size_t i = 0; i < f.size(); ++i) sum[i] += f[i];
        ++count;
    }
    if (tests.empty() || centroids.empty()) {
        throw std::invalid_argument("oracle_separability_check: need both fit and test windows");
    }
    for (auto& [label, sc] : centroids) {
        for (auto& v : sc.first) v /= static_cast<double>(sc.second);
    }
    std::size_t correct = 0;
    for (const auto& [f, label] : tests) {
        int best = -1;
        double best_d = 0.0;
        for (const auto& [cl, sc] : centroids) {
            double d = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) d += (f[i] - sc.first[i]) * (f[i] - sc.first[i]);
            if (best < 0 || d < best_d) {
                best = cl;
                best_d = d;
            }
        }
        if (best == label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(tests.size());
}

}  // namespace stgcn

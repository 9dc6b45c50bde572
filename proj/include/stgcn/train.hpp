#pragma once

// Optimization and evaluation harness: Adam with per-epoch learning-rate
// decay, early stopping on held-out loss, repetition-held-out k-fold
// cross-validation, and CSV emission of curves and fold results.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <exception>
#include <vector>

#include "stgcn/graph.hpp"
#include "stgcn/model.hpp"
#include "stgcn/signal.hpp"
#include "stgcn/synthdata.hpp"

namespace stgcn {

enum class LrDecayMode {
    Exponential,  // lr0 * (1 - decay)^epoch
    Inverse,      // lr0 / (1 + decay * epoch)
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr0 = 1e-3;
    double lr_decay = 0.05;
    LrDecayMode decay_mode = LrDecayMode::Exponential;
    std::size_t patience = 30;
    double min_delta = 1e-6;  // an epoch improves only if loss < best - min_delta
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::size_t k = 2;        // graph neighbors
    std::size_t jobs = 1;     // worker threads; results do not depend on it

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
        if (epochs < 1) fail("epochs must be >= 1");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(lr0 > 0.0)) fail("lr0 must be > 0");
        if (!(lr_decay >= 0.0 && lr_decay < 1.0)) fail("lr_decay must lie in [0, 1)");
        if (patience < 1) fail("patience must be >= 1");
        if (!(min_delta >= 0.0)) fail("min_delta must be >= 0");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
            fail("adam betas must lie in [0, 1)");
        }
        if (!(adam.eps > 0.0)) fail("adam eps must be > 0");
        if (k < 1) fail("k must be >= 1");
        if (jobs < 1) fail("jobs must be >= 1");
    }
};

/// lr for a 0-based epoch index. Monotone non-increasing in epoch.
inline double lr_schedule(const TrainConfig& cfg, std::size_t epoch) {
    const double e = static_cast<double>(epoch);
    switch (cfg.decay_mode) {
        case LrDecayMode::Inverse: return cfg.lr0 / (1.0 + cfg.lr_decay * e);
        case LrDecayMode::Exponential: break;
    }
    return cfg.lr0 * std::pow(1.0 - cfg.lr_decay, e);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;
};

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One Adam update over parallel lists of parameters and gradients. State is
/// sized on first use. names[i] labels parameter i in errors.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                      std::span<const char* const> names, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads count differ");
    if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be > 0");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape != grads[i]->shape) {
            throw ShapeError(std::string("adam_step: gradient shape mismatch for ") +
                             (i < names.size() ? names[i] : "param"));
        }
        for (double g : grads[i]->data) {
            if (!std::isfinite(g)) {
                throw NonFiniteGradient(std::string("adam_step: non-finite gradient in ") +
                                        (i < names.size() ? names[i] : "param #" + std::to_string(i)));
            }
        }
    }
    if (state.m.empty()) {
        for (Tensor* p : params) {
            state.m.emplace_back(p->shape);
            state.v.emplace_back(p->shape);
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->data;
        const auto& g = grads[i]->data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    const auto p = params.tensors();
    const auto g = grads.tensors();
    adam_step(std::span<Tensor* const>(p), std::span<const Tensor* const>(g),
              std::span<const char* const>(ModelParams::kNames), state, lr, cfg);
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best held-out loss; signals a stop after `patience` epochs
/// without an improvement larger than min_delta.
class EarlyStopper {
public:
    EarlyStopper(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

    /// Returns true when this epoch is the new best.
    bool update(double loss) {
        if (loss < best_ - min_delta_) {
            best_ = loss;
            wait_ = 0;
            return true;
        }
        ++wait_;
        return false;
    }

    bool should_stop() const { return wait_ >= patience_; }
    double best() const { return best_; }

private:
    std::size_t patience_;
    double min_delta_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t wait_ = 0;
};

// ---------------------------------------------------------------------------
// Data and folds

/// A window ready for the network: samples, propagation matrix, label.
struct Sample {
    Tensor window;       // [N, L]
    Tensor propagation;  // [N, N]
    int label = 0;
    int repetition = 0;
};

struct GraphOptions {
    std::size_t k = 2;
    bool zscore = true;
    CorrelationMode correlation = CorrelationMode::Absolute;
};

/// Per-window graphs. The graph is computed from the raw window (correlation
/// is scale invariant), the stored samples are z-scored when requested.
inline std::vector<Sample> prepare_samples(std::span<const Window> windows, const GraphOptions& opt) {
    std::vector<Sample> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        Sample s;
        s.propagation = to_tensor(build_graph(w, opt.k, opt.correlation).propagation);
        s.window = opt.zscore ? zscore_normalize(w).data : w.data;
        s.label = w.label;
        s.repetition = w.repetition;
        out.push_back(std::move(s));
    }
    return out;
}

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

class EmptyFoldError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fold f tests exactly the items with repetition f and trains on the rest.
inline std::vector<Fold> kfold_split(std::span<const int> repetitions, std::size_t n_folds = 5) {
    if (n_folds < 2) throw std::invalid_argument("kfold_split: need at least 2 folds");
    std::vector<Fold> folds(n_folds);
    for (std::size_t i = 0; i < repetitions.size(); ++i) {
        const int r = repetitions[i];
        if (r < 0 || static_cast<std::size_t>(r) >= n_folds) {
            throw std::out_of_range("kfold_split: repetition " + std::to_string(r) + " of item " +
                                    std::to_string(i) + " outside [0, " + std::to_string(n_folds) + ")");
        }
        for (std::size_t f = 0; f < n_folds; ++f) {
            (static_cast<std::size_t>(r) == f ? folds[f].test : folds[f].train).push_back(i);
        }
    }
    for (std::size_t f = 0; f < n_folds; ++f) {
        if (folds[f].test.empty()) throw EmptyFoldError("empty fold " + std::to_string(f));
    }
    return folds;
}

inline std::vector<int> repetitions_of(std::span<const Sample> samples) {
    std::vector<int> r;
    r.reserve(samples.size());
    for (const auto& s : samples) r.push_back(s.repetition);
    return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    std::size_t fold = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_loss = 0.0;
    double test_acc = 0.0;
};

struct FoldResult {
    ModelParams params;  // best held-out-loss checkpoint
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
    double test_loss = 0.0;      // at best_epoch
    double test_accuracy = 0.0;  // at best_epoch
    std::uint64_t optimizer_steps = 0;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

namespace detail {

// Samples per gradient shard. Shards are reduced in index order, so the
// summation order and therefore the result never depend on the thread count.
inline constexpr std::size_t kShardSize = 8;

template <typename Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
    const std::size_t workers = std::min(jobs, count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < count; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

struct SampleOutcome {
    double loss = 0.0;
    bool correct = false;
};

inline SampleOutcome run_sample(const Sample& s, const ModelParams& params, const ModelConfig& mcfg,
                                bool training, std::uint64_t dropout_seed, ModelParams* grad_acc) {
    // One recycled tape per thread keeps node buffers warm across samples.
    thread_local Tape tape;
    tape.clear();
    const ParamVars pv = bind_params(tape, params, grad_acc != nullptr);
    std::mt19937_64 rng(dropout_seed);
    Var logits = stgcn_forward(tape, pv, s.window, s.propagation, mcfg, training, rng);
    Var loss = softmax_cross_entropy(logits, static_cast<std::size_t>(s.label));
    SampleOutcome out;
    out.loss = loss.value()[0];
    out.correct = predict(logits.value().data) == static_cast<std::size_t>(s.label);
    if (grad_acc != nullptr) {
        tape.backward(loss);
        accumulate_grads(pv, *grad_acc);
    }
    return out;
}

}  // namespace detail

/// Mean loss and accuracy in eval mode.
inline EvalResult evaluate(std::span<const Sample> samples, std::span<const std::size_t> ids,
                           const ModelParams& params, const ModelConfig& mcfg, std::size_t jobs = 1) {
    std::vector<detail::SampleOutcome> res(ids.size());
    detail::parallel_for(ids.size(), jobs, [&](std::size_t i) {
        res[i] = detail::run_sample(samples[ids[i]], params, mcfg, false, 0, nullptr);
    });
    EvalResult e;
    for (const auto& r : res) {
        e.loss += r.loss;
        e.accuracy += r.correct ? 1.0 : 0.0;
    }
    if (!ids.empty()) {
        e.loss /= static_cast<double>(ids.size());
        e.accuracy /= static_cast<double>(ids.size());
    }
    return e;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains one fold from a seeded initialization. Each epoch runs Adam over
/// shuffled mini-batches of the mean cross-entropy, then scores the held-out
/// ids; returns the parameters of the epoch with the lowest held-out loss.
inline FoldResult train_fold(std::span<const Sample> samples, std::span<const std::size_t> train_ids,
                             std::span<const std::size_t> test_ids, const ModelConfig& mcfg,
                             const TrainConfig& tcfg, std::size_t fold = 0,
                             const EpochCallback& on_epoch = {}) {
    mcfg.validate();
    tcfg.validate();
    if (train_ids.empty() || test_ids.empty()) {
        throw std::invalid_argument("train_fold: train and test sets must be non-empty");
    }
    for (auto id : train_ids) {
        if (samples[id].label < 0 || static_cast<std::size_t>(samples[id].label) >= mcfg.classes) {
            throw std::out_of_range("train_fold: label " + std::to_string(samples[id].label) +
                                    " outside [0, " + std::to_string(mcfg.classes) + ")");
        }
    }

    FoldResult result;
    ModelParams params = init_params(mcfg, mix_seed(tcfg.seed, 0x494e4954, fold));
    result.params = params;
    AdamState adam;
    EarlyStopper stopper(tcfg.patience, tcfg.min_delta);
    std::vector<std::size_t> order(train_ids.begin(), train_ids.end());

    for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::sort(order.begin(), order.end());
        std::mt19937_64 shuffle_rng(mix_seed(tcfg.seed, 0x53485546, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const double lr = lr_schedule(tcfg, epoch);

        double loss_sum = 0.0, correct = 0.0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += tcfg.batch_size, ++batch) {
            const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
            const std::size_t bsz = end - start;
            const std::size_t shards = (bsz + detail::kShardSize - 1) / detail::kShardSize;
            std::vector<ModelParams> shard_grads(shards, zero_params(mcfg));
            std::vector<detail::SampleOutcome> outcomes(bsz);
            detail::parallel_for(shards, tcfg.jobs, [&](std::size_t sh) {
                const std::size_t lo = sh * detail::kShardSize;
                const std::size_t hi = std::min(bsz, lo + detail::kShardSize);
                for (std::size_t i = lo; i < hi; ++i) {
                    const std::uint64_t dseed = mix_seed(tcfg.seed, 0x44524f50 + fold, epoch, start + i);
                    outcomes[i] = detail::run_sample(samples[order[start + i]], params, mcfg, true,
                                                     dseed, &shard_grads[sh]);
                }
            });
            ModelParams grads = zero_params(mcfg);
            auto gt = grads.tensors();
            for (auto& sg : shard_grads) {
                auto st = sg.tensors();
                for (std::size_t t = 0; t < ModelParams::kCount; ++t) {
                    for (std::size_t j = 0; j < gt[t]->size(); ++j) gt[t]->data[j] += st[t]->data[j];
                }
            }
            const double inv = 1.0 / static_cast<double>(bsz);
            for (Tensor* t : gt) {
                for (auto& v : t->data) v *= inv;
            }
            double batch_loss = 0.0;
            for (const auto& o : outcomes) {
                batch_loss += o.loss;
                correct += o.correct ? 1.0 : 0.0;
            }
            if (!std::isfinite(batch_loss)) {
                throw TrainingDiverged("training diverged: non-finite loss at epoch " +
                                       std::to_string(epoch + 1) + ", batch " + std::to_string(batch));
            }
            loss_sum += batch_loss;
            try {
                adam_step(params, grads, adam, lr, tcfg.adam);
            } catch (const NonFiniteGradient& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch + 1) +
                                       ", batch " + std::to_string(batch) + ": " + e.what());
            }
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.fold = fold;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_acc = correct / static_cast<double>(order.size());
        const EvalResult ev = evaluate(samples, test_ids, params, mcfg, tcfg.jobs);
        rec.test_loss = ev.loss;
        rec.test_acc = ev.accuracy;
        if (!std::isfinite(ev.loss)) {
            throw TrainingDiverged("training diverged: non-finite held-out loss at epoch " +
                                   std::to_string(epoch + 1));
        }
        result.curve.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (stopper.update(ev.loss)) {
            result.params = params;
            result.best_epoch = rec.epoch;
            result.test_loss = ev.loss;
            result.test_accuracy = ev.accuracy;
        }
        if (stopper.should_stop()) break;
    }
    result.optimizer_steps = adam.t;
    return result;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct Metrics {
    std::vector<double> fold_accuracy;
    double mean = 0.0;
    double std = 0.0;  // population
    std::vector<EpochRecord> curves;
};

struct CvResult {
    Metrics metrics;
    std::vector<ModelParams> fold_params;
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> v) {
    if (v.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size()))};
}

struct CvOptions {
    std::size_t n_folds = 5;
    /// Replace per-window graphs by one graph from each fold's training
    /// windows. Requires the raw windows.
    bool global_graph = false;
    std::span<const Window> raw_windows;
    GraphOptions graph;
    EpochCallback on_epoch;
};

/// Runs train_fold on every repetition-held-out fold.
inline CvResult cross_validate(std::span<const Sample> samples, const ModelConfig& mcfg,
                               const TrainConfig& tcfg, const CvOptions& opt = {}) {
    const auto reps = repetitions_of(samples);
    const auto folds = kfold_split(reps, opt.n_folds);
    CvResult out;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::span<const Sample> view = samples;
        std::vector<Sample> regraphed;
        if (opt.global_graph) {
            if (opt.raw_windows.size() != samples.size()) {
                throw std::invalid_argument("cross_validate: global graph needs the raw windows");
            }
            std::vector<Window> train_windows;
            for (auto id : folds[f].train) train_windows.push_back(opt.raw_windows[id]);
            const Matrix a = pearson_adjacency(std::span<const Window>(train_windows), opt.graph.correlation);
            const Tensor s = to_tensor(build_graph(a, opt.graph.k).propagation);
            regraphed.assign(samples.begin(), samples.end());
            for (auto& smp : regraphed) smp.propagation = s;
            view = regraphed;
        }
        FoldResult fr = train_fold(view, folds[f].train, folds[f].test, mcfg, tcfg, f, opt.on_epoch);
        out.metrics.fold_accuracy.push_back(fr.test_accuracy);
        out.metrics.curves.insert(out.metrics.curves.end(), fr.curve.begin(), fr.curve.end());
        out.fold_params.push_back(std::move(fr.params));
    }
    std::tie(out.metrics.mean, out.metrics.std) = mean_std(out.metrics.fold_accuracy);
    return out;
}

// ---------------------------------------------------------------------------
// CSV output. Every file starts with a `# config_hash=<hex>` line.

namespace detail {

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string curves_csv(const std::vector<EpochRecord>& curves, const std::string& hash) {
    std::ostringstream os;
    os << "# config_hash=" << hash << '\n';
    os << "epoch,fold,train_loss,train_acc,test_loss,test_acc\n";
    for (const auto& r : curves) {
        os << r.epoch << ',' << r.fold << ',' << detail::num(r.train_loss) << ','
           << detail::num(r.train_acc) << ',' << detail::num(r.test_loss) << ','
           << detail::num(r.test_acc) << '\n';
    }
    return os.str();
}

inline std::string folds_csv(const Metrics& m, const std::string& hash) {
    std::ostringstream os;
    os << "# config_hash=" << hash << '\n';
    os << "fold,accuracy\n";
    for (std::size_t f = 0; f < m.fold_accuracy.size(); ++f) {
        os << f << ',' << detail::num(m.fold_accuracy[f]) << '\n';
    }
    return os.str();
}

inline std::string summary_csv(const Metrics& m, const std::string& hash) {
    std::ostringstream os;
    os << "# config_hash=" << hash << '\n';
    os << "mean,std,config_hash\n";
    os << detail::num(m.mean) << ',' << detail::num(m.std) << ',' << hash << '\n';
    return os.str();
}

/// Reads the accuracy column of a folds.csv body.
inline std::vector<double> parse_folds_csv(std::istream& in) {
    std::vector<double> acc;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("fold,", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::invalid_argument("folds.csv: malformed line");
        acc.push_back(std::stod(line.substr(comma + 1)));
    }
    return acc;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace stgcn

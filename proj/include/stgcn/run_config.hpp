#pragma once

// Plain `key = value` run configuration with flag overrides and a stable
// provenance hash (FNV-1a 64 over the sorted canonical text).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "stgcn/graph.hpp"
#include "stgcn/model.hpp"
#include "stgcn/synthdata.hpp"
#include "stgcn/train.hpp"

namespace stgcn {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class RunConfig {
public:
    RunConfig() = default;
    explicit RunConfig(std::map<std::string, std::string> defaults) : values_(std::move(defaults)) {}

    /// Sets a known key. Unknown keys are rejected so typos fail loudly.
    void set(const std::string& key, const std::string& value) {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second = value;
    }

    /// Applies one `key=value` override.
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("expected key=value, got '" + assignment + "'");
        }
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    void parse(std::istream& in, const std::string& origin = "config") {
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            try {
                set_assignment(line);
            } catch (const ConfigError& e) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        parse(in, path);
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key) const {
        const auto& s = get(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used == s.size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError(key + ": expected a number, got '" + s + "'");
    }

    std::uint64_t get_u64(const std::string& key) const {
        const auto& s = get(key);
        try {
            std::size_t used = 0;
            if (!s.empty() && s[0] != '-') {
                const auto v = std::stoull(s, &used);
                if (used == s.size()) return v;
            }
        } catch (const std::exception&) {
        }
        throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    }

    std::size_t get_size(const std::string& key) const {
        return static_cast<std::size_t>(get_u64(key));
    }

    bool get_bool(const std::string& key) const {
        const auto& s = get(key);
        if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
        if (s == "0" || s == "false" || s == "no" || s == "off") return false;
        throw ConfigError(key + ": expected a boolean, got '" + s + "'");
    }

    /// Sorted `key=value` lines.
    std::string canonical() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
        return os.str();
    }

    /// Keys that only affect how a run executes (thread count), not what it
    /// computes, are left out of the hash.
    void exclude_from_hash(const std::string& key) {
        get(key);
        unhashed_.insert(key);
    }

    std::string hash() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) {
            if (!unhashed_.count(k)) os << k << '=' << v << '\n';
        }
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : os.str()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
    std::set<std::string> unhashed_;
};

/// Defaults for segmentation, graph construction, model and training.
inline RunConfig pipeline_defaults() {
    RunConfig rc({
        {"window_ms", "250"},
        {"overlap", "0.5"},
        {"zscore", "1"},
        {"k", "2"},
        {"correlation", "absolute"},
        {"global_graph", "0"},
        {"kt", "5"},
        {"c_temporal", "64"},
        {"c_spatial", "64"},
        {"hidden", "128"},
        {"classes", "65"},
        {"dropout", "0.5"},
        {"head_dropout", "1"},
        {"epochs", "100"},
        {"batch_size", "64"},
        {"lr", "0.001"},
        {"lr_decay", "0.05"},
        {"decay_mode", "exponential"},
        {"patience", "30"},
        {"min_delta", "1e-6"},
        {"seed", "0"},
        {"folds", "5"},
        {"jobs", "1"},
    });
    rc.exclude_from_hash("jobs");
    return rc;
}

inline RunConfig synth_defaults() {
    const SynthConfig d;
    return RunConfig({
        {"n_classes", std::to_string(d.n_classes)},
        {"n_nodes", std::to_string(d.n_nodes)},
        {"window_len", std::to_string(d.window_len)},
        {"reps", std::to_string(d.reps)},
        {"windows_per_rep", std::to_string(d.windows_per_rep)},
        {"groups", std::to_string(d.groups)},
        {"noise_std", "0.3"},
        {"seed", std::to_string(d.seed)},
        {"sample_rate", std::to_string(d.sample_rate)},
    });
}

inline CorrelationMode correlation_mode(const RunConfig& rc) {
    const auto& s = rc.get("correlation");
    if (s == "absolute") return CorrelationMode::Absolute;
    if (s == "positive") return CorrelationMode::PositiveOnly;
    throw ConfigError("correlation: expected 'absolute' or 'positive', got '" + s + "'");
}

inline GraphOptions graph_options(const RunConfig& rc) {
    GraphOptions g;
    g.k = rc.get_size("k");
    g.zscore = rc.get_bool("zscore");
    g.correlation = correlation_mode(rc);
    if (g.k < 1) throw ConfigError("k must be >= 1");
    return g;
}

/// Model config for data with the given node count and window length.
inline ModelConfig model_config(const RunConfig& rc, std::size_t n_nodes, std::size_t window_len) {
    ModelConfig m;
    m.n_nodes = n_nodes;
    m.window_len = window_len;
    m.kt = rc.get_size("kt");
    m.c_temporal = rc.get_size("c_temporal");
    m.c_spatial = rc.get_size("c_spatial");
    m.hidden = rc.get_size("hidden");
    m.classes = rc.get_size("classes");
    m.dropout = rc.get_double("dropout");
    m.head_dropout = rc.get_bool("head_dropout");
    m.validate();
    return m;
}

inline TrainConfig train_config(const RunConfig& rc) {
    TrainConfig t;
    t.epochs = rc.get_size("epochs");
    t.batch_size = rc.get_size("batch_size");
    t.lr0 = rc.get_double("lr");
    t.lr_decay = rc.get_double("lr_decay");
    const auto& mode = rc.get("decay_mode");
    if (mode == "exponential") {
        t.decay_mode = LrDecayMode::Exponential;
    } else if (mode == "inverse") {
        t.decay_mode = LrDecayMode::Inverse;
    } else {
        throw ConfigError("decay_mode: expected 'exponential' or 'inverse', got '" + mode + "'");
    }
    t.patience = rc.get_size("patience");
    t.min_delta = rc.get_double("min_delta");
    t.seed = rc.get_u64("seed");
    t.k = rc.get_size("k");
    t.jobs = rc.get_size("jobs");
    t.validate();
    return t;
}

inline SynthConfig synth_config(const RunConfig& rc) {
    SynthConfig s;
    s.n_classes = rc.get_size("n_classes");
    s.n_nodes = rc.get_size("n_nodes");
    s.window_len = rc.get_size("window_len");
    s.reps = rc.get_size("reps");
    s.windows_per_rep = rc.get_size("windows_per_rep");
    s.groups = rc.get_size("groups");
    s.noise_std = rc.get_double("noise_std");
    s.seed = rc.get_u64("seed");
    s.sample_rate = static_cast<std::uint32_t>(rc.get_u64("sample_rate"));
    s.validate();
    return s;
}

/// Checks every pipeline field that does not depend on the data.
inline void validate_pipeline(const RunConfig& rc) {
    (void)graph_options(rc);
    (void)train_config(rc);
    (void)model_config(rc, 2, std::max<std::size_t>(rc.get_size("kt"), 1));
    const double overlap = rc.get_double("overlap");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
    if (!(rc.get_double("window_ms") > 0.0)) throw ConfigError("window_ms must be > 0");
    if (rc.get_size("folds") < 2) throw ConfigError("folds must be >= 2");
    (void)rc.get_bool("global_graph");
}

}  // namespace stgcn

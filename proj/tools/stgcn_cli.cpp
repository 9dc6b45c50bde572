// Command-line driver: segment, graph, cv, sweep-k, synth.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error. Failures print a
// single line on stderr.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "stgcn/stgcn.hpp"

namespace fs = std::filesystem;
using namespace stgcn;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ConfigArgs {
    std::string file;
    std::vector<std::string> sets;
    std::vector<std::string> shortcuts;  // dedicated flags, applied last
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.file, "key = value config file");
    cmd->add_option("--set", a.sets, "override one key (key=value); repeatable");
}

// --flag V as a shorthand for --set key=V.
void add_shortcut(CLI::App* cmd, ConfigArgs& a, const std::string& flag, const std::string& key) {
    cmd->add_option_function<std::string>(
        flag, [&a, key](const std::string& v) { a.shortcuts.push_back(key + "=" + v); }, "same as --set " + key + "=V");
}

RunConfig load_config(RunConfig rc, const ConfigArgs& a) {
    if (!a.file.empty()) rc.load_file(a.file);
    for (const auto& s : a.sets) rc.set_assignment(s);
    for (const auto& s : a.shortcuts) rc.set_assignment(s);
    return rc;
}

std::string format(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string sidecar_for(const fs::path& emg) {
    fs::path p = emg;
    p.replace_extension(".ann");
    return p.string();
}

EmgRecording load_with_annotations(const std::string& path, const std::string& ann_path) {
    EmgRecording rec = load_recording(path);
    rec.annotations = load_annotations(ann_path);
    validate(rec);
    return rec;
}

// Every *.emg in dir (sorted by name) with its .ann sidecar, segmented with
// the configured geometry. Subject id = file index.
std::vector<Window> load_dataset(const std::string& dir, const RunConfig& rc) {
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".emg") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .emg files in " + dir);
    std::vector<Window> windows;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const std::string ann = sidecar_for(files[i]);
        if (!fs::exists(ann)) throw std::runtime_error("missing annotation sidecar " + ann);
        const EmgRecording rec = load_with_annotations(files[i].string(), ann);
        auto w = segment_windows(rec, rc.get_double("window_ms"), rc.get_double("overlap"), static_cast<int>(i));
        if (!windows.empty() && !w.empty() && w.front().data.shape != windows.front().data.shape) {
            throw std::runtime_error(files[i].string() + ": window shape differs from earlier files");
        }
        windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    if (windows.empty()) throw std::runtime_error("dataset " + dir + " produced no windows");
    return windows;
}

struct CvRun {
    CvResult result;
    ModelConfig model;
};

CvRun run_cv(const std::vector<Window>& windows, const RunConfig& rc, bool verbose) {
    const ModelConfig mcfg = model_config(rc, windows.front().channels(), windows.front().length());
    const TrainConfig tcfg = train_config(rc);
    for (const auto& w : windows) {
        if (w.label < 0 || static_cast<std::size_t>(w.label) >= mcfg.classes) {
            throw std::runtime_error("label " + std::to_string(w.label) + " outside [0, classes=" +
                                     std::to_string(mcfg.classes) + ")");
        }
    }
    CvOptions opt;
    opt.n_folds = rc.get_size("folds");
    opt.graph = graph_options(rc);
    opt.global_graph = rc.get_bool("global_graph");
    opt.raw_windows = windows;
    if (verbose) {
        opt.on_epoch = [](const EpochRecord& r) {
            std::cerr << "fold " << r.fold << " epoch " << r.epoch << " train_loss " << format("%.5f", r.train_loss)
                      << " test_loss " << format("%.5f", r.test_loss) << " test_acc " << format("%.4f", r.test_acc)
                      << '\n';
        };
    }
    const auto samples = prepare_samples(windows, opt.graph);
    return {cross_validate(samples, mcfg, tcfg, opt), mcfg};
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
    std::string in, annotations, out;
    ConfigArgs cfg;
    int subject = 0;
};

int cmd_segment(const SegmentArgs& a) {
    const RunConfig rc = load_config(pipeline_defaults(), a.cfg);
    validate_pipeline(rc);
    const std::string ann = a.annotations.empty() ? sidecar_for(a.in) : a.annotations;
    const EmgRecording rec = load_with_annotations(a.in, ann);
    const WindowGeometry geom = window_geometry(rec.sample_rate, rc.get_double("window_ms"), rc.get_double("overlap"));
    const auto windows = segment_windows(rec, geom, a.subject);
    if (windows.empty()) {
        std::cerr << "warning: no windows produced (" << rec.annotations.size()
                  << " annotations, window " << geom.length << " samples)\n";
    }
    fs::create_directories(a.out);
    const std::string hash = rc.hash();

    std::map<std::pair<int, int>, std::size_t> counts;
    std::string index = "# config_hash=" + hash + "\nfile,label,repetition,subject,source_offset\n";
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const Window& w = windows[i];
        char name[32];
        std::snprintf(name, sizeof name, "window_%06zu", i);
        EmgRecording out;
        out.channels = rec.channels;
        out.sample_rate = rec.sample_rate;
        out.samples = geom.length;
        out.data = w.data.data;
        out.annotations = {{0, geom.length, w.label, w.repetition}};
        save_recording(out, (fs::path(a.out) / (std::string(name) + ".emg")).string());
        save_annotations(out.annotations, (fs::path(a.out) / (std::string(name) + ".ann")).string());
        index += std::string(name) + ".emg," + std::to_string(w.label) + ',' + std::to_string(w.repetition) + ',' +
                 std::to_string(w.subject) + ',' + std::to_string(w.source_offset) + '\n';
        ++counts[{w.label, w.repetition}];
    }
    std::string manifest = "# config_hash=" + hash + "\nlabel,repetition,count\n";
    for (const auto& [key, n] : counts) {
        manifest += std::to_string(key.first) + ',' + std::to_string(key.second) + ',' + std::to_string(n) + '\n';
    }
    write_text((fs::path(a.out) / "manifest.csv").string(), manifest);
    write_text((fs::path(a.out) / "windows.csv").string(), index);
    std::cout << windows.size() << " windows (L=" << geom.length << ", hop=" << geom.hop << ") -> " << a.out << '\n';
    return 0;
}

struct GraphArgs {
    std::string window, dot, csv, correlation = "absolute";
    std::size_t k = 2;
    bool full = false;
};

int cmd_graph(const GraphArgs& a) {
    if (a.k < 1) throw UsageError("--k must be >= 1");
    if (a.dot.empty() && a.csv.empty()) throw UsageError("nothing to do: give --dot and/or --csv");
    RunConfig rc = pipeline_defaults();
    rc.set("correlation", a.correlation);
    const CorrelationMode mode = correlation_mode(rc);
    const EmgRecording rec = load_recording(a.window);
    Window w;
    w.data = Tensor(Shape{rec.channels, rec.samples}, rec.data);
    if (a.k + 1 > rec.channels) {
        throw UsageError("--k must be <= channels - 1 (" + std::to_string(rec.channels - 1) + ")");
    }
    const MuscleGraph g = build_graph(pearson_adjacency(w, mode), a.k);
    const Matrix& shown = a.full ? g.adjacency : g.weights;
    const std::string note = std::string(a.full ? "full adjacency" : "k-NN graph k=" + std::to_string(a.k)) +
                             ", correlation=" + a.correlation + ", source=" + fs::path(a.window).filename().string();
    if (!a.dot.empty()) {
        const auto regions = default_regions(g.nodes());
        write_text(a.dot, export_dot(shown, regions, note));
    }
    if (!a.csv.empty()) write_text(a.csv, export_csv(shown, a.full, note));
    std::size_t edges = 0;
    for (Eigen::Index i = 0; i < shown.rows(); ++i)
        for (Eigen::Index j = i + 1; j < shown.cols(); ++j) edges += shown(i, j) != 0.0;
    std::cout << g.nodes() << " nodes, " << edges << " edges\n";
    return 0;
}

struct CvArgs {
    std::string data, out;
    ConfigArgs cfg;
    bool verbose = false;
};

int cmd_cv(const CvArgs& a) {
    const RunConfig rc = load_config(pipeline_defaults(), a.cfg);
    validate_pipeline(rc);
    const auto windows = load_dataset(a.data, rc);
    const auto t0 = std::chrono::steady_clock::now();
    const CvRun run = run_cv(windows, rc, a.verbose);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const std::string hash = rc.hash();
    fs::create_directories(a.out);
    const fs::path out(a.out);
    const Metrics& m = run.result.metrics;
    write_text((out / "summary.csv").string(), summary_csv(m, hash));
    write_text((out / "folds.csv").string(), folds_csv(m, hash));
    write_text((out / "curves.csv").string(), curves_csv(m.curves, hash));
    write_text((out / "config.txt").string(), "# config_hash=" + hash + '\n' + rc.canonical());
    for (std::size_t f = 0; f < run.result.fold_params.size(); ++f) {
        save_checkpoint((out / ("fold_" + std::to_string(f) + ".stgw")).string(), run.model, run.result.fold_params[f]);
    }
    for (std::size_t f = 0; f < m.fold_accuracy.size(); ++f) {
        std::cout << "fold " << f << " accuracy " << format("%.4f", m.fold_accuracy[f]) << '\n';
    }
    std::cout << "mean " << format("%.4f", m.mean) << " std " << format("%.4f", m.std) << " (" << windows.size()
              << " windows, " << format("%.1f", secs) << " s, config " << hash << ")\n";
    return 0;
}

struct SweepArgs {
    std::string data, out;
    ConfigArgs cfg;
    std::size_t k_min = 2, k_max = 6;
};

int cmd_sweep_k(const SweepArgs& a) {
    if (a.k_min < 1) throw UsageError("--k-min must be >= 1");
    if (a.k_max < a.k_min) throw UsageError("--k-max must be >= --k-min");
    RunConfig rc = load_config(pipeline_defaults(), a.cfg);
    validate_pipeline(rc);
    const auto windows = load_dataset(a.data, rc);
    if (a.k_max + 1 > windows.front().channels()) {
        throw UsageError("--k-max must be <= channels - 1 (" + std::to_string(windows.front().channels() - 1) + ")");
    }
    std::string csv = "k,mean,std,config_hash\n";
    for (std::size_t k = a.k_min; k <= a.k_max; ++k) {
        rc.set("k", std::to_string(k));
        const CvRun run = run_cv(windows, rc, false);
        const Metrics& m = run.result.metrics;
        csv += std::to_string(k) + ',' + detail::num(m.mean) + ',' + detail::num(m.std) + ',' + rc.hash() + '\n';
        std::cout << "k=" << k << " mean " << format("%.4f", m.mean) << " std " << format("%.4f", m.std) << '\n';
    }
    fs::create_directories(a.out);
    // The sweep varies k, so the header hash is taken with k at its sweep
    // placeholder; each row carries the exact per-k hash.
    rc.set("k", "0");
    write_text((fs::path(a.out) / "sweep_k.csv").string(), "# config_hash=" + rc.hash() + '\n' + csv);
    return 0;
}

struct SynthArgs {
    std::string out;
    ConfigArgs cfg;
};

int cmd_synth(const SynthArgs& a) {
    const RunConfig rc = load_config(synth_defaults(), a.cfg);
    const SynthConfig s = synth_config(rc);
    const auto windows = generate_synthetic_dataset(s);
    const double oracle = oracle_separability_check(windows);
    const EmgRecording rec = to_recording(windows, s.sample_rate);
    fs::create_directories(a.out);
    const fs::path out(a.out);
    save_recording(rec, (out / "synthetic.emg").string());
    save_annotations(rec.annotations, (out / "synthetic.ann").string());
    write_text((out / "synth.cfg").string(), "# config_hash=" + rc.hash() + '\n' + rc.canonical());

    // Matching cv settings: one window per annotation, no overlap, and the
    // reduced widths used for the synthetic experiment.
    RunConfig cv = pipeline_defaults();
    cv.set("window_ms", detail::num(1000.0 * static_cast<double>(s.window_len) / s.sample_rate));
    cv.set("overlap", "0");
    cv.set("classes", std::to_string(s.n_classes));
    cv.set("c_temporal", "8");
    cv.set("c_spatial", "8");
    cv.set("hidden", "32");
    cv.set("batch_size", "16");
    cv.set("lr", "0.005");
    cv.set("epochs", "50");
    cv.set("folds", std::to_string(s.reps));
    validate_pipeline(cv);
    std::string text = "# cv settings for " + (out / "synthetic.emg").string() + "\n";
    for (const auto& [k, v] : cv.values()) text += k + " = " + v + '\n';
    write_text((out / "cv.cfg").string(), text);
    std::cout << windows.size() << " windows, " << s.n_classes << " classes, oracle separability "
              << format("%.4f", oracle) << " -> " << a.out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatio-temporal graph network for HD-sEMG gesture recognition"};
    app.require_subcommand(1);

    SegmentArgs seg;
    auto* c_seg = app.add_subcommand("segment", "cut a recording into labeled windows");
    c_seg->add_option("--in", seg.in, "EMG1 recording")->required();
    c_seg->add_option("--annotations", seg.annotations, "annotation CSV (default: <in>.ann)");
    c_seg->add_option("--out", seg.out, "output directory")->required();
    c_seg->add_option("--subject", seg.subject, "subject id stored with each window");
    add_config_options(c_seg, seg.cfg);
    add_shortcut(c_seg, seg.cfg, "--window-ms", "window_ms");
    add_shortcut(c_seg, seg.cfg, "--overlap", "overlap");

    GraphArgs gr;
    auto* c_graph = app.add_subcommand("graph", "export the muscle network of one window file");
    c_graph->add_option("--window", gr.window, "EMG1 window file")->required();
    c_graph->add_option("--k", gr.k, "neighbors kept per node")->capture_default_str();
    c_graph->add_option("--dot", gr.dot, "write Graphviz DOT");
    c_graph->add_option("--csv", gr.csv, "write node_i,node_j,weight CSV");
    c_graph->add_flag("--full", gr.full, "export the unpruned adjacency");
    c_graph->add_option("--correlation", gr.correlation, "absolute | positive")->capture_default_str();

    CvArgs cv;
    auto* c_cv = app.add_subcommand("cv", "repetition-held-out cross-validation");
    c_cv->add_option("--data", cv.data, "directory of .emg recordings with .ann sidecars")->required();
    c_cv->add_option("--out", cv.out, "output directory")->required();
    c_cv->add_flag("--verbose", cv.verbose, "print every epoch to stderr");
    add_config_options(c_cv, cv.cfg);
    add_shortcut(c_cv, cv.cfg, "--folds", "folds");
    add_shortcut(c_cv, cv.cfg, "--jobs", "jobs");
    add_shortcut(c_cv, cv.cfg, "--seed", "seed");

    SweepArgs sw;
    auto* c_sweep = app.add_subcommand("sweep-k", "cross-validate over a range of k");
    c_sweep->add_option("--data", sw.data, "directory of .emg recordings with .ann sidecars")->required();
    c_sweep->add_option("--out", sw.out, "output directory")->required();
    c_sweep->add_option("--k-min", sw.k_min)->capture_default_str();
    c_sweep->add_option("--k-max", sw.k_max)->capture_default_str();
    add_config_options(c_sweep, sw.cfg);
    add_shortcut(c_sweep, sw.cfg, "--jobs", "jobs");

    SynthArgs sy;
    auto* c_synth = app.add_subcommand("synth", "write a synthetic dataset and matching cv config");
    c_synth->add_option("--out", sy.out, "output directory")->required();
    add_config_options(c_synth, sy.cfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "stgcn_cli: usage error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*c_seg) return cmd_segment(seg);
        if (*c_graph) return cmd_graph(gr);
        if (*c_cv) return cmd_cv(cv);
        if (*c_sweep) return cmd_sweep_k(sw);
        if (*c_synth) return cmd_synth(sy);
    } catch (const UsageError& e) {
        std::cerr << "stgcn_cli: usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "stgcn_cli: usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        std::cerr << "stgcn_cli: error: " << msg << '\n';
        return 1;
    }
    return 1;
}

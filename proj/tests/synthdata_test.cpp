#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "oracles.hpp"
#include "stgcn/signal.hpp"
#include "stgcn/synthdata.hpp"
#include "temp_dir.hpp"

using namespace stgcn;

TEST(Synth, NoiselessGroupsAreNearlyPerfectlyCorrelated) {
    SynthConfig cfg;
    cfg.noise_std = 0.0;
    const auto patterns = make_class_patterns(cfg);
    const auto windows = generate_synthetic_dataset(cfg);
    const std::size_t len = cfg.window_len;
    for (const auto& w : windows) {
        const auto& g = patterns[static_cast<std::size_t>(w.label)].group;
        for (std::size_t i = 0; i < cfg.n_nodes; ++i)
            for (std::size_t j = i + 1; j < cfg.n_nodes; ++j)
                if (g[i] == g[j]) {
                    const double r = oracle::pearson(&w.data.data[i * len], &w.data.data[j * len], len);
                    ASSERT_GE(std::abs(r), 0.99);
                }
    }
    EXPECT_EQ(oracle_separability_check(windows), 1.0);
}

TEST(Synth, DefaultConfigIsSeparable) {
    EXPECT_GE(oracle_separability_check(generate_synthetic_dataset(SynthConfig{})), 0.9);
}

TEST(Synth, PermutedLabelsScoreNearChance) {
    const SynthConfig cfg;
    const auto base = generate_synthetic_dataset(cfg);
    std::mt19937_64 rng(3);
    double total = 0.0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
        auto windows = base;
        std::vector<int> labels;
        for (const auto& w : windows) labels.push_back(w.label);
        std::shuffle(labels.begin(), labels.end(), rng);
        for (std::size_t i = 0; i < windows.size(); ++i) windows[i].label = labels[i];
        total += oracle_separability_check(windows);
    }
    EXPECT_NEAR(total / trials, 1.0 / static_cast<double>(cfg.n_classes), 0.06);
}

TEST(Synth, SeededGenerationIsBitIdentical) {
    SynthConfig cfg;
    const auto a = generate_synthetic_dataset(cfg);
    const auto b = generate_synthetic_dataset(cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].data, b[i].data);
        EXPECT_EQ(a[i].label, b[i].label);
    }
    cfg.seed = 2;
    EXPECT_FALSE(generate_synthetic_dataset(cfg)[0].data == a[0].data);
}

TEST(Synth, ClassRepetitionCellsAreBalanced) {
    const SynthConfig cfg;
    std::map<std::pair<int, int>, std::size_t> cells;
    for (const auto& w : generate_synthetic_dataset(cfg)) {
        ++cells[{w.label, w.repetition}];
        ASSERT_EQ(w.data.shape, (Shape{cfg.n_nodes, cfg.window_len}));
        for (double v : w.data.data) ASSERT_TRUE(std::isfinite(v));
    }
    EXPECT_EQ(cells.size(), cfg.n_classes * cfg.reps);
    for (const auto& [cell, n] : cells) EXPECT_EQ(n, cfg.windows_per_rep);
}

TEST(Synth, ClassesHaveDistinctBalancedPartitions) {
    SynthConfig cfg;
    cfg.n_classes = 20;
    const auto p = make_class_patterns(cfg);
    for (std::size_t a = 0; a < p.size(); ++a) {
        std::vector<int> sizes(cfg.groups, 0);
        for (int g : p[a].group) ++sizes[static_cast<std::size_t>(g)];
        for (int s : sizes) EXPECT_EQ(s, static_cast<int>(cfg.n_nodes / cfg.groups));
        for (std::size_t b = a + 1; b < p.size(); ++b) EXPECT_NE(p[a].group, p[b].group);
    }
}

TEST(Synth, SurvivesTheContainerAndSegmentation) {
    TempDir dir;
    const SynthConfig cfg;
    const auto windows = generate_synthetic_dataset(cfg);
    const auto rec = to_recording(windows, cfg.sample_rate);
    save_recording(rec, dir.file("s.emg"));
    save_annotations(rec.annotations, dir.file("s.ann"));
    auto back = load_recording(dir.file("s.emg"));
    back.annotations = load_annotations(dir.file("s.ann"));
    const double ms = 1000.0 * static_cast<double>(cfg.window_len) / cfg.sample_rate;
    const auto seg = segment_windows(back, ms, 0.0);
    ASSERT_EQ(seg.size(), windows.size());
    for (std::size_t i = 0; i < seg.size(); ++i) {
        EXPECT_EQ(seg[i].data, windows[i].data);
        EXPECT_EQ(seg[i].label, windows[i].label);
        EXPECT_EQ(seg[i].repetition, windows[i].repetition);
    }
}

TEST(Synth, InvalidConfigsAreRejected) {
    SynthConfig cfg;
    cfg.n_classes = 1;
    EXPECT_THROW(generate_synthetic_dataset(cfg), std::invalid_argument);
    cfg = SynthConfig{};
    cfg.window_len = 5;
    EXPECT_THROW(generate_synthetic_dataset(cfg), std::invalid_argument);
    cfg = SynthConfig{};
    cfg.n_nodes = 3;
    EXPECT_THROW(generate_synthetic_dataset(cfg), std::invalid_argument);
}

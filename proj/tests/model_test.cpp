#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "stgcn/graph.hpp"
#include "stgcn/model.hpp"
#include "temp_dir.hpp"

using namespace stgcn;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.n_nodes = 4;
    c.window_len = 12;
    c.kt = 3;
    c.c_temporal = 2;
    c.c_spatial = 2;
    c.hidden = 5;
    c.classes = 3;
    return c;
}

Tensor random_propagation(std::size_t n, std::mt19937_64& rng) {
    Window w;
    w.data = oracle::random_tensor({n, 32}, rng);
    return to_tensor(build_graph(w, std::min<std::size_t>(2, n - 1)).propagation);
}

// Loss of the full pipeline with parameter `which` taken from x.
ScalarFn pipeline_loss(const ModelParams& p, std::size_t which, const Tensor& window, const Tensor& s,
                       const ModelConfig& cfg, bool training, std::size_t label) {
    return [=](Tape& tape, const Var& x) {
        ParamVars pv = bind_params(tape, p, false);
        pv.v[which] = x;
        std::mt19937_64 rng(17);  // same mask on every evaluation
        return softmax_cross_entropy(stgcn_forward(tape, pv, window, s, cfg, training, rng), label);
    };
}

Tensor head_oracle(const Tensor& f, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
    Tensor x(Shape{1, f.size()}, f.data);
    Tensor z = oracle::matmul(x, w1);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = std::max(0.0, z[j] + b1[j]);
    Tensor y = oracle::matmul(z, w2);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += b2[j];
    return y;
}

}  // namespace

TEST(TemporalGatedConv, ZeroGateHalvesTheLinearPath) {
    std::mt19937_64 rng(1);
    const Tensor u = oracle::random_tensor({3, 10, 2}, rng);
    Tensor gamma = oracle::random_tensor({4, 2, 6}, rng);
    for (std::size_t d = 0; d < 4; ++d)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t o = 3; o < 6; ++o) gamma.data[(d * 2 + c) * 6 + o] = 0.0;
    Tape t;
    Var uv = t.constant(u), gv = t.constant(gamma);
    const Tensor out = temporal_gated_conv(uv, gv).value();
    const Tensor p = slice_last(conv1d_valid(uv, gv), 0, 3).value();
    ASSERT_EQ(out.shape, p.shape);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.5 * p[i]);
}

TEST(TemporalGatedConv, MatchesNaiveOracle) {
    std::mt19937_64 rng(2);
    const Tensor u = oracle::random_tensor({3, 8, 1}, rng);
    const Tensor gamma = oracle::random_tensor({5, 1, 4}, rng);
    Tape t;
    const Tensor out = temporal_gated_conv(t.constant(u), t.constant(gamma)).value();
    const Tensor ref = oracle::glu(oracle::conv_valid(u, gamma));
    ASSERT_EQ(out.shape, (Shape{3, 4, 2}));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(TemporalGatedConv, OutputLengthIsLMinusKtPlusOne) {
    for (std::size_t len = 1; len <= 20; ++len) {
        for (std::size_t kt = 1; kt <= len; ++kt) {
            Tape t;
            Var y = temporal_gated_conv(t.constant(Tensor(Shape{2, len, 1})), t.constant(Tensor(Shape{kt, 1, 4})));
            EXPECT_EQ(y.shape(), (Shape{2, len - kt + 1, 2}));
        }
    }
}

TEST(TemporalGatedConv, WindowShorterThanKernelIsAnError) {
    Tape t;
    EXPECT_THROW(temporal_gated_conv(t.constant(Tensor(Shape{2, 4, 1})), t.constant(Tensor(Shape{5, 1, 4}))),
                 std::invalid_argument);
}

TEST(SpatialGraphConv, IdentityOperators) {
    std::mt19937_64 rng(3);
    const Tensor h = oracle::random_tensor({4, 3, 2}, rng);
    Tape t;
    const Tensor out = spatial_graph_conv(t.constant(Tensor::identity(4)), t.constant(h), t.constant(Tensor::identity(2))).value();
    EXPECT_EQ(out, h);
}

TEST(SpatialGraphConv, NullSpaceOfAveragingOperator) {
    Tape t;
    const Tensor s(Shape{2, 2}, std::vector<double>{.5, .5, .5, .5});
    const Tensor h(Shape{2, 1, 3}, std::vector<double>{1, 2, -3, -1, -2, 3});
    std::mt19937_64 rng(4);
    const Tensor out = spatial_graph_conv(t.constant(s), t.constant(h), t.constant(oracle::random_tensor({3, 2}, rng))).value();
    for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(SpatialGraphConv, MatchesTripleLoopAndRenormalizedFormula) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5;
        Matrix w = Matrix::Zero(n, n);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (u(rng) < 0.5) w(i, j) = w(j, i) = u(rng);
        // D~^-1/2 (W + I) D~^-1/2 written out entry by entry.
        Tensor s(Shape{n, n});
        std::vector<double> deg(n, 1.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) deg[i] += w(i, j);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) s.at(i, j) = (w(i, j) + (i == j)) / std::sqrt(deg[i] * deg[j]);
        const Tensor lib_s = to_tensor(renormalized_propagation(w));
        for (std::size_t i = 0; i < s.size(); ++i) ASSERT_NEAR(lib_s[i], s[i], 1e-15);

        const Tensor h = oracle::random_tensor({n, 3, 4}, rng);
        const Tensor theta = oracle::random_tensor({4, 2}, rng);
        Tape t;
        const Tensor out = spatial_graph_conv(t.constant(lib_s), t.constant(h), t.constant(theta)).value();
        const Tensor ref = oracle::graph_conv(s, h, theta);
        for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
    }
}

TEST(SpatialGraphConv, CommutesWithNodePermutation) {
    std::mt19937_64 rng(6);
    const std::size_t n = 6;
    const Tensor s = random_propagation(n, rng);
    const Tensor h = oracle::random_tensor({n, 2, 3}, rng);
    const Tensor theta = oracle::random_tensor({3, 2}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor ps(Shape{n, n}), ph(h.shape);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) ps.at(i, j) = s.at(perm[i], perm[j]);
        for (std::size_t k = 0; k < 6; ++k) ph.data[i * 6 + k] = h.data[perm[i] * 6 + k];
    }
    Tape t;
    const Tensor out = spatial_graph_conv(t.constant(s), t.constant(h), t.constant(theta)).value();
    const Tensor pout = spatial_graph_conv(t.constant(ps), t.constant(ph), t.constant(theta)).value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(pout.data[i * 4 + k], out.data[perm[i] * 4 + k], 1e-14);
}

TEST(SpatialGraphConv, ShapeMismatchIsAnError) {
    Tape t;
    EXPECT_THROW(spatial_graph_conv(t.constant(Tensor::identity(3)), t.constant(Tensor(Shape{4, 2, 2})),
                                    t.constant(Tensor(Shape{2, 2}))),
                 ShapeError);
}

TEST(LayerNorm, HandComputedRow) {
    Tape t;
    Var y = layer_norm(t.constant(Tensor(Shape{1, 1, 3}, std::vector<double>{1, 2, 3})), t.constant(Tensor(Shape{3}, 1.0)),
                       t.constant(Tensor(Shape{3})), 1e-5);
    EXPECT_NEAR(y.value()[0], -1.2247, 1e-4);
    EXPECT_NEAR(y.value()[1], 0.0, 1e-12);
    EXPECT_NEAR(y.value()[2], 1.2247, 1e-4);
    EXPECT_NEAR(y.value()[2], 1.0 / std::sqrt(2.0 / 3.0 + 1e-5), 1e-15);
}

TEST(LayerNorm, ConstantRowGivesBias) {
    Tape t;
    const std::vector<double> bias{0.1, -0.2, 0.3};
    Var y = layer_norm(t.constant(Tensor(Shape{1, 1, 3}, 4.0)), t.constant(Tensor(Shape{3}, 2.0)),
                       t.constant(Tensor(Shape{3}, bias)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], bias[i], 1e-15);
}

TEST(LayerNorm, RowMeanEqualsBiasMean) {
    std::mt19937_64 rng(7);
    const Tensor bias = oracle::random_tensor({5}, rng);
    Tape t;
    Var y = layer_norm(t.constant(oracle::random_tensor({3, 4, 5}, rng, -10.0, 10.0)), t.constant(Tensor(Shape{5}, 1.0)),
                       t.constant(bias));
    const double bias_mean = std::accumulate(bias.data.begin(), bias.data.end(), 0.0) / 5.0;
    for (std::size_t r = 0; r < 12; ++r) {
        double m = 0.0;
        for (std::size_t c = 0; c < 5; ++c) m += y.value()[r * 5 + c];
        EXPECT_NEAR(m / 5.0, bias_mean, 1e-10);
    }
}

TEST(Dropout, EvalModeAndZeroRateAreIdentity) {
    std::mt19937_64 rng(8);
    Tape t;
    Var h = t.constant(oracle::random_tensor({10, 10}, rng));
    EXPECT_EQ(dropout(h, 0.5, rng, false).value(), h.value());
    EXPECT_EQ(dropout(h, 0.0, rng, true).value(), h.value());
}

TEST(Dropout, HalfRateStatistics) {
    std::mt19937_64 rng(9);
    Tape t;
    Var h = t.constant(Tensor(Shape{1000000}, 1.0));
    const Tensor out = dropout(h, 0.5, rng, true).value();
    std::size_t survivors = 0;
    double total = 0.0;
    for (double v : out.data) {
        survivors += v != 0.0;
        total += v;
        ASSERT_TRUE(v == 0.0 || v == 2.0);
    }
    EXPECT_NEAR(static_cast<double>(survivors) / 1e6, 0.5, 0.002);
    EXPECT_NEAR(total / 1e6, 1.0, 0.005);
}

TEST(Dropout, RateMustBeBelowOne) {
    std::mt19937_64 rng(0);
    Tape t;
    EXPECT_THROW(dropout(t.constant(Tensor(Shape{2})), 1.0, rng, true), std::invalid_argument);
}

TEST(ClassifierHead, ZeroWeightsGiveZeroLogits) {
    Tape t;
    std::mt19937_64 rng(10);
    Var y = classifier_head(t.constant(oracle::random_tensor({4, 3}, rng)), t.constant(Tensor(Shape{12, 6})),
                            t.constant(Tensor(Shape{6})), t.constant(Tensor(Shape{6, 5})), t.constant(Tensor(Shape{5})));
    EXPECT_EQ(y.value(), Tensor(Shape{5}));
}

TEST(ClassifierHead, OneHotRouting) {
    Tape t;
    Tensor f(Shape{2, 2}, std::vector<double>{0.1, 0.7, 0.3, 0.4});
    Tensor w1(Shape{4, 1});
    w1.data[1] = 1.0;  // hidden = feature 1
    Tensor w2(Shape{1, 3});
    w2.data[2] = 1.0;  // logit 2 = hidden
    Var y = classifier_head(t.constant(f), t.constant(w1), t.constant(Tensor(Shape{1})), t.constant(w2),
                            t.constant(Tensor(Shape{3})));
    EXPECT_EQ(y.value().data, (std::vector<double>{0.0, 0.0, 0.7}));
}

TEST(ClassifierHead, MatchesAffineChainOracle) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor f = oracle::random_tensor({4, 3}, rng), w1 = oracle::random_tensor({12, 7}, rng);
        const Tensor b1 = oracle::random_tensor({7}, rng), w2 = oracle::random_tensor({7, 5}, rng);
        const Tensor b2 = oracle::random_tensor({5}, rng);
        Tape t;
        const Tensor y = classifier_head(t.constant(f), t.constant(w1), t.constant(b1), t.constant(w2), t.constant(b2)).value();
        const Tensor ref = head_oracle(f, w1, b1, w2, b2);
        for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
    Tape t;
    const double loss = softmax_cross_entropy(t.constant(Tensor(Shape{65}, 0.3)), 17).value()[0];
    EXPECT_NEAR(loss, std::log(65.0), 1e-12);
    EXPECT_NEAR(loss, 4.1744, 1e-4);
}

TEST(CrossEntropy, SaturatedLogit) {
    Tape t;
    Tensor z(Shape{65});
    z.data[3] = 30.0;
    const double loss = softmax_cross_entropy(t.constant(z), 3).value()[0];
    EXPECT_GE(loss, 0.0);
    EXPECT_LT(loss, 1e-9);
}

TEST(CrossEntropy, ShiftInvariant) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = oracle::random_tensor({9}, rng, -5.0, 5.0);
        Tape t;
        const double a = softmax_cross_entropy(t.constant(z), 4).value()[0];
        for (auto& v : z.data) v += 3.75;
        const double b = softmax_cross_entropy(t.constant(z), 4).value()[0];
        EXPECT_GE(a, 0.0);
        EXPECT_NEAR(a, b, 1e-12);
    }
}

TEST(Predict, ArgmaxWithSmallestIndexOnTies) {
    EXPECT_EQ(predict(std::vector<double>{0.1, 0.9, 0.3}), 1u);
    EXPECT_EQ(predict(std::vector<double>{2.0, 2.0, 2.0}), 0u);
    EXPECT_EQ(predict(std::vector<double>{0.0, 5.0, 5.0}), 1u);
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor z = oracle::random_tensor({7}, rng);
        const auto before = predict(z.data);
        for (auto& v : z.data) v += 0.5;  // exact in binary for these magnitudes
        EXPECT_EQ(predict(z.data), before);
    }
}

TEST(Forward, DefaultConfigOutputsBatchBy65) {
    const ModelConfig cfg;
    const ModelParams p = init_params(cfg, 1);
    std::mt19937_64 rng(14);
    std::vector<Tensor> windows{oracle::random_tensor({128, 512}, rng), oracle::random_tensor({128, 512}, rng)};
    windows.push_back(windows[0]);
    std::vector<Tensor> props;
    for (const auto& w : windows) {
        Window win;
        win.data = w;
        props.push_back(to_tensor(build_graph(win, 2).propagation));
    }
    const Tensor logits = stgcn_forward_batch(p, cfg, windows, props);
    EXPECT_EQ(logits.shape, (Shape{3, 65}));
    for (double v : logits.data) EXPECT_TRUE(std::isfinite(v));
    for (std::size_t c = 0; c < 65; ++c) EXPECT_EQ(logits.at(0, c), logits.at(2, c));
}

TEST(Forward, EvalModeIsPure) {
    const ModelConfig cfg = toy_config();
    const ModelParams p = init_params(cfg, 2);
    std::mt19937_64 rng(15);
    const Tensor w = oracle::random_tensor({4, 12}, rng), s = random_propagation(4, rng);
    auto run = [&](std::uint64_t seed) {
        Tape tape;
        std::mt19937_64 r(seed);
        return stgcn_forward(tape, bind_params(tape, p, false), w, s, cfg, false, r).value();
    };
    EXPECT_EQ(run(1), run(999));
}

TEST(Forward, RejectsMisshapedInputs) {
    const ModelConfig cfg = toy_config();
    const ModelParams p = init_params(cfg, 3);
    Tape tape;
    std::mt19937_64 r(0);
    const ParamVars pv = bind_params(tape, p, false);
    EXPECT_THROW(stgcn_forward(tape, pv, Tensor(Shape{4, 11}), Tensor::identity(4), cfg, false, r), ShapeError);
    EXPECT_THROW(stgcn_forward(tape, pv, Tensor(Shape{4, 12}), Tensor::identity(3), cfg, false, r), ShapeError);
}

TEST(Forward, ToyPipelineGradientsMatchFiniteDifferences) {
    const ModelConfig cfg = toy_config();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(100 + seed);
        ModelParams p = init_params(cfg, seed);
        // Non-trivial layer-norm affine so its gradients are exercised.
        p.ln_gain = oracle::random_tensor({2}, rng, 0.5, 1.5);
        p.ln_bias = oracle::random_tensor({2}, rng, -0.5, 0.5);
        const Tensor w = oracle::random_tensor({4, 12}, rng), s = random_propagation(4, rng);
        for (bool training : {false, true}) {
            const auto ts = p.tensors();
            for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
                EXPECT_LE(grad_check(pipeline_loss(p, i, w, s, cfg, training, seed % 3), *ts[i]), 1e-4)
                    << ModelParams::kNames[i] << " seed " << seed << " training " << training;
            }
        }
    }
}

TEST(Params, ShapesFollowConfig) {
    const ModelConfig cfg;
    const ModelParams p = init_params(cfg, 0);
    EXPECT_EQ(p.temporal_kernel.shape, (Shape{5, 1, 128}));
    EXPECT_EQ(p.spatial_weight.shape, (Shape{64, 64}));
    EXPECT_EQ(p.fc1_weight.shape, (Shape{128 * 64, 128}));
    EXPECT_EQ(p.fc2_weight.shape, (Shape{128, 65}));
    EXPECT_EQ(init_params(cfg, 0), p);
    EXPECT_FALSE(init_params(cfg, 1) == p);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir;
    ModelConfig cfg = toy_config();
    cfg.dropout = 0.3;
    cfg.head_dropout = false;
    ModelParams p = init_params(cfg, 4);
    p.fc2_bias.data[0] = std::nextafter(1.0, 2.0);
    p.ln_bias.data[1] = -0.0;
    save_checkpoint(dir.file("m.stgw"), cfg, p);
    const Checkpoint ck = load_checkpoint(dir.file("m.stgw"));
    EXPECT_EQ(ck.config, cfg);
    const auto a = p.tensors();
    const auto b = ck.params.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
        ASSERT_EQ(a[i]->shape, b[i]->shape);
        EXPECT_EQ(std::memcmp(a[i]->data.data(), b[i]->data.data(), a[i]->size() * sizeof(double)), 0);
    }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    const ModelConfig cfg = toy_config();
    std::stringstream ss;
    write_checkpoint(ss, cfg, init_params(cfg, 5));
    std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "STGW");

    std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_checkpoint(truncated), CheckpointError);
    bytes[0] = 'X';
    std::istringstream bad(bytes);
    EXPECT_THROW(read_checkpoint(bad), CheckpointError);
}

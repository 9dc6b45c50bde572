#include <gtest/gtest.h>

#include <sstream>

#include "stgcn/run_config.hpp"

using namespace stgcn;

TEST(RunConfig, DefaultsMatchTheProtocol) {
    const RunConfig rc = pipeline_defaults();
    const TrainConfig t = train_config(rc);
    EXPECT_EQ(t.batch_size, 64u);
    EXPECT_EQ(t.lr0, 0.001);
    EXPECT_EQ(t.patience, 30u);
    EXPECT_EQ(t.k, 2u);
    const ModelConfig m = model_config(rc, 128, 512);
    EXPECT_EQ(m.kt, 5u);
    EXPECT_EQ(m.classes, 65u);
    EXPECT_EQ(rc.get_size("folds"), 5u);
    EXPECT_NO_THROW(validate_pipeline(rc));
}

TEST(RunConfig, ParsesFileThenOverrides) {
    RunConfig rc = pipeline_defaults();
    std::istringstream in("# comment\n  k = 4  \nlr=0.01 # trailing\n\n");
    rc.parse(in);
    rc.set_assignment("k=3");
    EXPECT_EQ(rc.get_size("k"), 3u);
    EXPECT_EQ(rc.get_double("lr"), 0.01);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
    RunConfig rc = pipeline_defaults();
    std::istringstream in("k=2\nbogus=1\n");
    try {
        rc.parse(in, "x.cfg");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(rc.set_assignment("k"), ConfigError);
    rc.set("k", "-1");
    EXPECT_THROW(rc.get_size("k"), ConfigError);
    rc.set("k", "2");
    rc.set("dropout", "1.5");
    EXPECT_THROW(validate_pipeline(rc), std::invalid_argument);
    rc.set("dropout", "0.5");
    rc.set("correlation", "signed");
    EXPECT_THROW(validate_pipeline(rc), ConfigError);
    rc.set("correlation", "positive");
    rc.set("overlap", "1");
    EXPECT_THROW(validate_pipeline(rc), ConfigError);
}

TEST(RunConfig, HashIsStableAndSensitive) {
    RunConfig a = pipeline_defaults(), b = pipeline_defaults();
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash().size(), 16u);
    b.set("seed", "1");
    EXPECT_NE(a.hash(), b.hash());
    b.set("seed", "0");
    EXPECT_EQ(a.hash(), b.hash());
    // Thread count does not change results, so it does not change the hash.
    b.set("jobs", "4");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.canonical(), b.canonical());
}

TEST(RunConfig, HashIsFnv1aOfCanonicalText) {
    RunConfig rc(std::map<std::string, std::string>{{"a", "1"}});
    EXPECT_EQ(rc.canonical(), "a=1\n");
    // FNV-1a 64 computed independently over "a=1\n".
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : std::string("a=1\n")) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    EXPECT_EQ(rc.hash(), buf);
}

TEST(RunConfig, SynthSettings) {
    RunConfig rc = synth_defaults();
    const SynthConfig s = synth_config(rc);
    EXPECT_EQ(s.n_classes, 8u);
    EXPECT_EQ(s.n_nodes, 16u);
    EXPECT_EQ(s.reps, 5u);
    rc.set("n_nodes", "2");
    EXPECT_THROW(synth_config(rc), std::invalid_argument);
}

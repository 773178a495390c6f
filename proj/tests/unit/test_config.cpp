#include "hydrofusion/config.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <fstream>

using namespace hydrofusion;

TEST(Config, DefaultsValidate) {
    const RunConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_FALSE(c.csv.has_value());
}

TEST(Config, ParsesSectionsAndKeys) {
    const RunConfig c = RunConfig::parse(
        "[model]\nwindow = 90\nhorizon = 5\nexperts = linear,lstm\nlearned_gate = false\n"
        "[train]\nepochs = 3\nlr = 0.01\n[loss]\npl = 0\n[run]\nseed = 42\n");
    EXPECT_EQ(c.model.window, 90u);
    EXPECT_EQ(c.model.horizon, 5u);
    EXPECT_EQ(c.model.experts.count(), 2u);
    EXPECT_FALSE(c.model.learned_gate);
    EXPECT_EQ(c.train.epochs, 3u);
    EXPECT_DOUBLE_EQ(c.train.optimizer.lr, 0.01);
    EXPECT_EQ(c.train.weights.pl, 0.0);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.window_config().window, 90u);
}

TEST(Config, UnknownKeyOrSectionRejected) {
    try {
        RunConfig::parse("[model]\nwindw = 90\n");
        FAIL() << "no error";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.windw"), std::string::npos);
    }
    EXPECT_THROW(RunConfig::parse("[modle]\nwindow = 90\n"), ConfigError);
}

TEST(Config, MalformedValuesRejected) {
    EXPECT_THROW(RunConfig::parse("[model]\nwindow = ninety\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("[model]\nwindow = -3\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("[model]\nexperts = linear,banana\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("[data]\ntrain_fraction = 0.9\nvalidation_fraction = 0.2\n"), ConfigError);
    EXPECT_THROW(RunConfig::parse("[model]\nwindow = \n"), ConfigError);
    EXPECT_THROW(RunConfig::load("/nonexistent/config.ini"), ConfigError);
}

TEST(Config, RoundTripThroughIni) {
    RunConfig c;
    c.set("model", "window", "120");
    c.set("model", "experts", "frequency,dyn_norm_attention");
    c.set("loss", "gamma_kge", "0.25");
    c.set("run", "seed", "77");
    const RunConfig back = RunConfig::parse(c.to_ini());
    EXPECT_EQ(back.to_ini(), c.to_ini());
    EXPECT_EQ(back.hash(), c.hash());
    EXPECT_EQ(back.model.experts, c.model.experts);
    EXPECT_EQ(back.train.seed, c.train.seed);
}

TEST(Config, HashTracksContent) {
    RunConfig a, b;
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash().size(), 16u);
    b.set("train", "epochs", "41");
    EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, Fnv1aKnownValues) {
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");  // frozen oracle
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Config, SeedDerivation) {
    RunConfig c;
    c.apply_seed(3);
    EXPECT_EQ(c.model.seed, 3u);
    EXPECT_EQ(c.train.seed, 3u * 0x9E3779B97F4A7C15ULL + 7u);
    RunConfig d = RunConfig::parse("[run]\nseed = 3\n");
    EXPECT_EQ(d.train.seed, c.train.seed);
}

TEST(Config, LoadFromFile) {
    const auto p = std::filesystem::temp_directory_path() / "hf_config_test.ini";
    {
        std::ofstream os(p);
        os << "[synthetic]\nyears = 4\n[eval]\nphysical_units = true\n";
    }
    const RunConfig c = RunConfig::load(p);
    EXPECT_EQ(c.synthetic.years, 4);
    EXPECT_TRUE(c.physical_units);
    std::filesystem::remove(p);
}

TEST(Config, BuildsSyntheticDataset) {
    RunConfig c = RunConfig::parse("[synthetic]\nyears = 2\n[model]\nwindow = 60\nhorizon = 7\n");
    const Dataset d = build_dataset(c);
    EXPECT_EQ(d.config.window, 60u);
    EXPECT_FALSE(d.windows.train_labeled.empty());
    EXPECT_FALSE(d.windows.test.empty());
    const std::string manifest = run_manifest(c, "train");
    EXPECT_NE(manifest.find(c.hash()), std::string::npos);
}

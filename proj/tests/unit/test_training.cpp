#include "hydrofusion/training.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace hydrofusion;
namespace fs = std::filesystem;

namespace {

const Dataset& shared_data() {
    static const Dataset d = [] {
        SyntheticConfig s;
        s.years = 3;
        const SeriesRecord r = generate_synthetic(s, 21);
        WindowConfig w;
        w.window = 60;
        w.horizon = 7;
        return prepare_dataset(r, SplitSpec::chronological(r.size()), w);
    }();
    return d;
}

ModelConfig model_config() {
    ModelConfig c;
    c.window = 60;
    c.horizon = 7;
    c.seed = 5;
    return c;
}

TrainConfig train_config() {
    TrainConfig t;
    t.epochs = 2;
    t.batch = 16;
    t.max_iterations = 3;
    t.patience = 5;
    t.seed = 9;
    return t;
}

Batch labeled_batch(std::size_t offset = 0, std::size_t n = 8) {
    const Dataset& d = shared_data();
    return make_batch(d, std::span<const WindowSample>(d.windows.train_labeled.data() + offset, n), true);
}

Batch unlabeled_batch(std::size_t n = 8) {
    const Dataset& d = shared_data();
    return make_batch(d, std::span<const WindowSample>(d.windows.train_unlabeled.data(), n), false);
}

std::vector<double> flat(const nn::ParamList& ps) {
    std::vector<double> out;
    for (const auto& p : ps) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

}  // namespace

TEST(AdamW, FirstStepExample) {
    std::vector<double> theta = {0.5}, g = {1.0}, m = {0.0}, v = {0.0};
    adamw_update(theta, g, m, v, 1, AdamWConfig{}, 0.0);
    EXPECT_NEAR(theta[0], 0.499600000004, 1e-15);  // frozen oracle
}

TEST(AdamW, DecoupledDecayOnly) {
    std::vector<double> theta = {0.5}, g = {0.0}, m = {0.0}, v = {0.0};
    adamw_update(theta, g, m, v, 1, AdamWConfig{}, 0.1);
    EXPECT_NEAR(theta[0], 0.49998, 1e-15);  // frozen oracle
}

TEST(AdamW, PeriodIsExemptFromDecay) {
    EXPECT_TRUE(decay_exempt("model.decomposition.seasonal.period"));
    EXPECT_FALSE(decay_exempt("model.gate.hidden.weight"));
}

TEST(AdamW, MissingGradientCountsAsZero) {
    nn::ParamList ps{{"w", Tensor::vector({1.0, -2.0}, true)}};
    AdamWConfig c;
    c.weight_decay = 0.0;
    AdamW opt(ps, c);
    opt.step();
    EXPECT_EQ(ps[0].tensor[0], 1.0);
    EXPECT_EQ(opt.state().step, 1u);
}

TEST(ClipGradNorm, ScalesToMaximum) {
    Tensor w = Tensor::vector({0.0, 0.0}, true);
    ad::Tape tape;
    {
        ad::TapeScope s(tape);
        tape.backward(ad::sum(w * Tensor::vector({3.0, 4.0})));
    }
    nn::ParamList ps{{"w", w}};
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(w.grad()[0], 0.6, 1e-15);
    EXPECT_NEAR(w.grad()[1], 0.8, 1e-15);
    EXPECT_NEAR(clip_grad_norm(ps, 10.0), 1.0, 1e-15);
    EXPECT_NEAR(w.grad()[1], 0.8, 1e-15);
}

TEST(Curriculum, LinearRampThenFlat) {
    const CurriculumSchedule c;
    EXPECT_DOUBLE_EQ(c.percentile(0), 20.0);
    EXPECT_DOUBLE_EQ(c.percentile(15), 40.0);
    EXPECT_DOUBLE_EQ(c.percentile(30), 60.0);
    EXPECT_DOUBLE_EQ(c.percentile(200), 60.0);
    for (std::size_t e = 1; e < 40; ++e) EXPECT_GE(c.percentile(e), c.percentile(e - 1));
    CurriculumSchedule bad;
    bad.end = 120.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainConfig, SemiSupervisedFlag) {
    TrainConfig t;
    EXPECT_TRUE(t.semi_supervised());
    t.weights.mask = t.weights.ctr = t.weights.cons = t.weights.pl = 0.0;
    EXPECT_FALSE(t.semi_supervised());
    t.batch = 0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(Trainer, StepReportsEveryTermAndRecomposes) {
    HydroFusionModel model(model_config());
    Trainer tr(model, shared_data(), train_config());
    const Batch l = labeled_batch(), u = unlabeled_batch();
    const IterationRecord r = tr.step(l, &u, 0, 0);
    EXPECT_GT(r.report.sup, 0.0);
    EXPECT_GT(r.report.mask, 0.0);
    EXPECT_GT(r.report.ctr, 0.0);
    EXPECT_GT(r.report.cons, 0.0);
    EXPECT_GE(r.report.pl, 0.0);
    EXPECT_DOUBLE_EQ(r.report.pl_percentile, 20.0);
    EXPECT_NEAR(r.report.recompose(train_config().weights), r.report.total, 1e-12);
    EXPECT_TRUE(std::isfinite(r.grad_norm));
}

TEST(Trainer, SupervisedOnlyIgnoresUnlabeledStream) {
    TrainConfig t = train_config();
    t.weights.mask = t.weights.ctr = t.weights.cons = t.weights.pl = 0.0;
    HydroFusionModel a(model_config()), b(model_config());
    Trainer ta(a, shared_data(), t), tb(b, shared_data(), t);
    const Batch l = labeled_batch(), u = unlabeled_batch();
    const auto ra = ta.step(l, &u, 0, 0);
    const auto rb = tb.step(l, nullptr, 0, 0);
    EXPECT_EQ(ra.report.total, rb.report.total);
    EXPECT_EQ(flat(a.parameters()), flat(b.parameters()));
    EXPECT_EQ(ra.report.mask, 0.0);
}

TEST(Trainer, DeterministicFit) {
    HydroFusionModel a(model_config()), b(model_config());
    Trainer ta(a, shared_data(), train_config()), tb(b, shared_data(), train_config());
    const auto ha = ta.fit(), hb = tb.fit();
    ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
    for (std::size_t e = 0; e < ha.epochs.size(); ++e) EXPECT_EQ(ha.epochs[e].val_sup, hb.epochs[e].val_sup);
    EXPECT_EQ(flat(a.parameters()), flat(b.parameters()));
}

TEST(Trainer, SingleEpoch) {
    TrainConfig t = train_config();
    t.epochs = 1;
    HydroFusionModel m(model_config());
    Trainer tr(m, shared_data(), t);
    const auto h = tr.fit();
    EXPECT_EQ(h.epochs.size(), 1u);
    EXPECT_EQ(h.best_epoch, 0u);
    EXPECT_EQ(h.epochs[0].iterations, 3u);
    EXPECT_FALSE(h.stopped_early);
}

TEST(Trainer, ZeroPatienceStopsAtFirstStall) {
    TrainConfig t = train_config();
    t.epochs = 30;
    t.patience = 0;
    t.optimizer.lr = 0.05;  // large steps so validation stalls quickly
    HydroFusionModel m(model_config());
    Trainer tr(m, shared_data(), t);
    const auto h = tr.fit();
    ASSERT_TRUE(h.stopped_early);
    EXPECT_EQ(h.epochs.size(), h.best_epoch + 2);
    // the best parameters are restored
    const auto v = validation_loss(m, shared_data(), shared_data().windows.validation, t.weights);
    EXPECT_NEAR(v.sup, h.best_val, 1e-9);
}

TEST(Trainer, InactiveExpertsNeverMove) {
    ModelConfig c = model_config();
    c.experts = std::bitset<kExpertCount>(0b00100);
    HydroFusionModel m(c);
    const auto before = flat(m.inactive_parameters());
    ASSERT_FALSE(before.empty());
    Trainer tr(m, shared_data(), train_config());
    const Batch l = labeled_batch(), u = unlabeled_batch();
    tr.step(l, &u, 0, 0);
    for (const auto& p : m.inactive_parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    EXPECT_EQ(flat(m.inactive_parameters()), before);
}

TEST(Trainer, UniformGateWhenGatingDisabled) {
    ModelConfig c = model_config();
    c.learned_gate = false;
    const HydroFusionModel m(c);
    const ModelOutput out = m.forward(labeled_batch().input);
    for (double g : hf_test::values(out.gate)) EXPECT_DOUBLE_EQ(g, 0.2);
}

TEST(Trainer, NonFiniteTargetIsReported) {
    HydroFusionModel m(model_config());
    Trainer tr(m, shared_data(), train_config());
    Batch l = labeled_batch();
    std::vector<double> y = hf_test::values(l.target);
    y[3] = std::nan("");
    l.target = Tensor(l.target.shape(), y);
    try {
        (void)tr.step(l, nullptr, 4, 2);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 4, iteration 2"), std::string::npos) << msg;
    }
}

TEST(Checkpoint, RoundTripReproducesForecasts) {
    HydroFusionModel m(model_config());
    Trainer tr(m, shared_data(), train_config());
    const Batch l = labeled_batch(), u = unlabeled_batch();
    (void)tr.step(l, &u, 0, 0);
    const fs::path p = fs::temp_directory_path() / "hydrofusion_unit_ckpt.json";
    save_checkpoint(p, m, &tr.optimizer(), "abc123", 4);
    HydroFusionModel fresh(model_config());
    Trainer tf(fresh, shared_data(), train_config());
    const CheckpointInfo info = load_checkpoint(p, fresh, &tf.optimizer());
    EXPECT_EQ(info.config_hash, "abc123");
    EXPECT_EQ(info.epoch, 4u);
    const Batch probe = labeled_batch(20, 5);
    const auto a = hf_test::values(m.forward(probe.input).forecast);
    const auto b = hf_test::values(fresh.forward(probe.input).forecast);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
    EXPECT_EQ(tf.optimizer().state().step, tr.optimizer().state().step);
    EXPECT_EQ(tf.optimizer().state().m, tr.optimizer().state().m);
}

TEST(Checkpoint, MismatchedModelRejected) {
    HydroFusionModel m(model_config());
    const fs::path p = fs::temp_directory_path() / "hydrofusion_unit_ckpt_shape.json";
    save_checkpoint(p, m, nullptr, "x", 0);
    ModelConfig other = model_config();
    other.horizon = 9;
    HydroFusionModel wrong(other);
    EXPECT_ANY_THROW(load_checkpoint(p, wrong, nullptr));
    std::ofstream(fs::temp_directory_path() / "hydrofusion_unit_garbage.json") << "{not json";
    EXPECT_ANY_THROW(load_checkpoint(fs::temp_directory_path() / "hydrofusion_unit_garbage.json", m, nullptr));
}

TEST(Checkpoint, FrozenEncoderUnchangedByTraining) {
    ModelConfig c = model_config();
    c.foundation = true;
    HydroFusionModel m(c);
    const std::string before = m.frozen_encoder()->hash();
    TrainConfig t = train_config();
    t.epochs = 1;
    Trainer tr(m, shared_data(), t);
    tr.fit();
    EXPECT_EQ(m.frozen_encoder()->hash(), before);
}

TEST(History, JsonLinesPerEpoch) {
    HydroFusionModel m(model_config());
    TrainConfig t = train_config();
    Trainer tr(m, shared_data(), t);
    const auto h = tr.fit();
    const fs::path p = fs::temp_directory_path() / "hydrofusion_unit_history.jsonl";
    write_history(p, h);
    std::ifstream in(p);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) ++lines;
        EXPECT_NE(line.find("\"q_percentile\""), std::string::npos);
    }
    EXPECT_EQ(lines, h.epochs.size());
}

TEST(Trainer, DivergedParametersRaiseNumericError) {
    HydroFusionModel m(model_config());
    for (auto& p : m.parameters()) {
        if (p.name.find("linear.head.weight") != std::string::npos) {
            for (double& v : p.tensor.mutable_data()) v = 1e300;
        }
    }
    Trainer tr(m, shared_data(), train_config());
    const Batch l = labeled_batch();
    EXPECT_THROW((void)tr.step(l, nullptr, 0, 0), NumericError);
}

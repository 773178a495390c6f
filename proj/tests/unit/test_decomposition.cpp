#include "hydrofusion/decomposition.hpp"
#include "test_util.hpp"

#include <cmath>
#include <numbers>

using namespace hydrofusion;
using hf_test::random_tensor;

namespace {

void zero_encoder_head(SeasonalModel& s) {
    for (Tensor t : {s.encoder.head.weight, s.encoder.head.bias}) {
        for (double& v : t.mutable_data()) v = 0.0;
    }
}

SeasonalCoefficients coefs(std::vector<double> alpha, std::vector<double> beta, bool grad = false) {
    const std::size_t M = alpha.size();
    return {Tensor({1, M}, std::move(alpha), grad), Tensor({1, M}, std::move(beta), grad)};
}

}  // namespace

TEST(Trend, SelectorWeightsReturnLastValue) {
    const TrendModel m({0, 0, 0, 1}, 0.0);
    const auto out = trend_forward(Tensor({1, 4}, {3, 1, 4, 1.5}), m);
    EXPECT_DOUBLE_EQ(out.end_value[0], 1.5);
}

TEST(Trend, MeanOfConstant) {
    const TrendModel m(5);
    const auto out = trend_forward(Tensor::full({2, 5}, 2.5), m);
    for (double v : out.curve.data()) EXPECT_NEAR(v, 2.5, 1e-15);
}

TEST(Trend, DotProductExample) {
    const TrendModel m({0.5, 0.5}, 1.0);
    EXPECT_DOUBLE_EQ(trend_forward(Tensor({1, 2}, {2, 4}), m).end_value[0], 4.0);  // frozen oracle
}

TEST(Trend, CausalCurvePadsWithFirstValue) {
    const TrendModel m({0, 0.5, 0.5}, 0.0);
    const auto out = trend_forward(Tensor({1, 3}, {2, 4, 8}), m);
    EXPECT_DOUBLE_EQ(out.curve[0], 2.0);  // x0 repeated to the left
    EXPECT_DOUBLE_EQ(out.curve[1], 3.0);
    EXPECT_DOUBLE_EQ(out.curve[2], 6.0);
}

TEST(Trend, WrongWindowLengthThrows) {
    const TrendModel m(4);
    EXPECT_THROW(trend_forward(Tensor::zeros({1, 5}), m), ad::ShapeError);
}

TEST(Trend, ConstantOutputIsFixedPoint) {
    const TrendModel m({0, 0, 0}, 2.0);
    const Tensor hat = trend_extrapolate(Tensor({1, 3}, {9, -1, 4}), m, 6);
    for (double v : hat.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Trend, SelectorWithBiasDriftsLinearly) {
    // frozen oracle: T_t = 7.25, then 7.5, 7.75, 8.0, 8.25
    const TrendModel m({0, 0, 1}, 0.25);
    const Tensor hat = trend_extrapolate(Tensor({1, 3}, {3, 5, 7}), m, 4);
    const double expected[] = {7.5, 7.75, 8.0, 8.25};
    for (std::size_t h = 0; h < 4; ++h) EXPECT_NEAR(hat[h], expected[h], 1e-14);
}

TEST(Seasonal, ZeroCoefficientsGiveZero) {
    const Tensor s = seasonal_basis(coefs({0, 0}, {0, 0}), Tensor::vector({365.25}), {{0, 1, 2, 100}});
    for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST(Seasonal, CosineAtPhaseZero) {
    EXPECT_DOUBLE_EQ(seasonal_basis(coefs({1}, {0}), Tensor::vector({365.25}), {{0}})[0], 1.0);
}

TEST(Seasonal, SineQuarterPeriod) {
    EXPECT_NEAR(seasonal_basis(coefs({0}, {1}), Tensor::vector({4.0}), {{1}})[0], 1.0, 1e-15);  // frozen oracle
}

TEST(Seasonal, PeriodicityWithFrozenCoefficients) {
    const auto c = coefs({0.3, -0.2, 0.1, 0.05}, {0.7, 0.4, -0.3, 0.2});
    for (double tau : {365.0, 365.25, 401.7}) {
        std::vector<double> t0, t1;
        for (int d = 0; d < 50; ++d) {
            t0.push_back(d * 3.7);
            t1.push_back(d * 3.7 + 3.0 * tau);
        }
        const Tensor a = seasonal_basis(c, Tensor::vector({tau}), {t0});
        const Tensor b = seasonal_basis(c, Tensor::vector({tau}), {t1});
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
    }
}

TEST(Seasonal, ExtrapolationOneYearAheadRepeatsPhase) {
    const auto c = coefs({0.5, 0.1, 0.0, 0.0}, {-0.3, 0.2, 0.1, 0.0});
    const Tensor s = seasonal_basis(c, Tensor::vector({365.0}), {{1000.0, 1365.0}});
    EXPECT_NEAR(s[0], s[1], 1e-9);
}

TEST(Seasonal, PeriodClampedToBounds) {
    nn::Rng rng(1);
    SeasonalModel s(4, rng);
    EXPECT_DOUBLE_EQ(s.period[0], 365.25);
    s.period.mutable_data()[0] = 1000.0;
    s.clamp_period();
    EXPECT_DOUBLE_EQ(s.period[0], SeasonalModel::kMaxPeriod);
    s.period.mutable_data()[0] = 1.0;
    s.clamp_period();
    EXPECT_DOUBLE_EQ(s.period[0], SeasonalModel::kMinPeriod);
}

TEST(Seasonal, EncoderEmitsTwoCoefficientsPerHarmonic) {
    nn::Rng rng(2);
    SeasonalModel s(3, rng);
    const auto c = s.coefficients(random_tensor({2, 60}, 1), {100, 200});
    EXPECT_EQ(c.alpha.shape(), (ad::Shape{2, 3}));
    EXPECT_EQ(c.beta.shape(), (ad::Shape{2, 3}));
    EXPECT_EQ(s.encoder.coefficients(random_tensor({2, 60}, 1)).shape(), (ad::Shape{2, 6}));
}

TEST(Seasonal, CoefficientsAreTranslationEquivariant) {
    // the same window placed a whole number of periods later yields the same curve
    nn::Rng rng(3);
    SeasonalModel s(2, rng);
    s.period.mutable_data()[0] = 365.0;
    const Tensor x = random_tensor({1, 40}, 2);
    const auto a = seasonal_forward(x, {500}, s);
    const auto b = seasonal_forward(x, {500 + 730}, s);
    for (std::size_t i = 0; i < a.curve.numel(); ++i) EXPECT_NEAR(a.curve[i], b.curve[i], 1e-9);
}

TEST(Seasonal, NegativeAnchorRejected) {
    nn::Rng rng(4);
    SeasonalModel s(2, rng);
    EXPECT_THROW(seasonal_forward(Tensor::zeros({1, 40}), {-1}, s), std::invalid_argument);
}

TEST(Decompose, ZeroModelsLeaveInputAsResidual) {
    nn::Rng rng(5);
    Decomposition d(40, 5, 2, rng);
    d.trend = TrendModel(std::vector<double>(40, 0.0), 0.0);
    zero_encoder_head(d.seasonal);
    const Tensor x = random_tensor({3, 40}, 6);
    const auto r = d.decompose(x, {50, 60, 70});
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(r.residual[i], x[i]);
}

TEST(Decompose, AdditivityOverRandomCases) {
    nn::Rng rng(7);
    Decomposition d(60, 10, 4, rng);
    std::mt19937_64 gen(8);
    std::uniform_int_distribution<std::int64_t> anchor(59, 5000);
    for (int c = 0; c < 200; ++c) {
        const Tensor x = random_tensor({2, 60}, 100 + c, 1.0 + c % 7);
        const auto r = d.decompose(x, {anchor(gen), anchor(gen)});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            ASSERT_LE(std::abs(x[i] - (r.trend[i] + r.seasonal[i] + r.residual[i])), 1e-12);
        }
    }
}

TEST(Decompose, ExtrapolationRangeChecked) {
    nn::Rng rng(9);
    Decomposition d(40, 5, 2, rng);
    const Tensor x = random_tensor({1, 40}, 1);
    const auto r = d.decompose(x, {100});
    EXPECT_EQ(r.trend_hat.shape(), (ad::Shape{1, 5}));
    EXPECT_THROW(d.extrapolate(x, {100}, r.coefficients, 0), std::out_of_range);
    EXPECT_THROW(d.extrapolate(x, {100}, r.coefficients, 6), std::out_of_range);
}

TEST(Decompose, SeasonalForecastContinuesInWindowCurve) {
    // with frozen coefficients the forecast is the basis evaluated at t+h
    nn::Rng rng(10);
    Decomposition d(40, 5, 2, rng);
    const Tensor x = random_tensor({1, 40}, 2);
    const auto r = d.decompose(x, {400});
    const Tensor direct = seasonal_basis(r.coefficients, d.seasonal.period, {{401, 402, 403, 404, 405}});
    for (std::size_t h = 0; h < 5; ++h) EXPECT_NEAR(r.seasonal_hat[h], direct[h], 1e-12);
}

TEST(DecomposeGrad, TrendParameters) {
    TrendModel m(std::vector<double>{0.2, -0.1, 0.4, 0.3, 0.1}, 0.3);
    const Tensor x = random_tensor({2, 5}, 11);
    hf_test::expect_gradients(
        [&] {
            const auto t = trend_forward(x, m);
            return ad::sum(ad::square(t.curve)) + ad::sum(ad::square(trend_extrapolate(x, m, 4)));
        },
        {m.weight, m.bias}, {"w", "b"});
}

TEST(DecomposeGrad, SeasonalCoefficientsAndPeriod) {
    auto c = coefs({0.3, -0.2}, {0.1, 0.5}, true);
    Tensor tau = Tensor::vector({365.25}, true);
    hf_test::expect_gradients(
        [&] { return ad::sum(ad::square(seasonal_basis(c, tau, {{10, 57, 123, 400, 401}}))); },
        {c.alpha, c.beta, tau}, {"alpha", "beta", "tau"});
}

TEST(DecomposeGrad, FullDecompositionParameters) {
    nn::Rng rng(12);
    Decomposition d(40, 6, 2, rng);
    // larger head weights so the period gradient stays well above round-off
    for (double& v : d.seasonal.encoder.head.weight.mutable_data()) v *= 20.0;
    const Tensor x = random_tensor({2, 40}, 13);
    nn::ParamList ps;
    d.collect(ps, "d");
    std::vector<Tensor> ts;
    std::vector<std::string> names;
    for (auto& p : ps) ts.push_back(p.tensor), names.push_back(p.name);
    hf_test::expect_gradients(
        [&] {
            const auto r = d.decompose(x, {300, 777});
            return ad::mean(ad::square(r.residual)) + ad::mean(ad::square(r.trend_hat + r.seasonal_hat));
        },
        ts, names, 12);
}

TEST(DecomposeGrad, GlobalCoefficientMode) {
    nn::Rng rng(14);
    Decomposition d(40, 6, 2, rng, true);
    const Tensor x = random_tensor({2, 40}, 15);
    hf_test::expect_gradients(
        [&] {
            const auto r = d.decompose(x, {300, 777});
            return ad::mean(ad::square(r.residual)) + ad::mean(ad::square(r.seasonal_hat));
        },
        {d.seasonal.global_coefficients, d.seasonal.period}, {"global", "tau"});
}

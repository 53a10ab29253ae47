#include <cmath>
#include <numbers>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fbm/deep_factorized.hpp"
#include "fbm/density_model.hpp"
#include "fbm/gaussian_mixture.hpp"
#include "fbm/rng.hpp"

using fbm::DeepFactorized;
using fbm::DeepFactorizedParams;
using fbm::GaussianMixtureParams;

namespace {

DeepFactorizedParams random_dfp(std::size_t m, fbm::Rng& rng) {
    auto p = DeepFactorizedParams::initial(m, rng);
    for (auto& v : p.values) v += rng.normal(0.0, 0.7);
    return p;
}

GaussianMixtureParams random_gmm(std::size_t k, fbm::Rng& rng) {
    GaussianMixtureParams p;
    p.components = k;
    p.values.resize(3 * k);
    for (std::size_t i = 0; i < k; ++i) {
        p.values[i] = rng.normal();
        p.values[k + i] = rng.uniform(-5.0, 5.0);
        p.values[2 * k + i] = rng.uniform(-1.5, 1.0);
    }
    return p;
}

template <class F>
double integrate(F&& f, double a, double b) {
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 20, 1e-12);
}

}  // namespace

TEST(DeepFactorized, ParameterCountMatchesLayerEnumeration) {
    for (std::size_t m : {1u, 3u, 5u, 10u, 20u}) {
        // [1,M,M,M,1]: weights 1*M + M*M + M*M + M*1, biases 3M + 1, gates 3M.
        const std::size_t expected = (m + m * m + m * m + m) + (3 * m + 1) + 3 * m;
        EXPECT_EQ(DeepFactorizedParams::param_count(m), expected);
        fbm::Rng rng(m);
        EXPECT_EQ(DeepFactorizedParams::initial(m, rng).values.size(), expected);
    }
    EXPECT_EQ(DeepFactorizedParams::param_count(5), 91u);
    EXPECT_EQ(DeepFactorizedParams::param_count(10), 281u);
}

TEST(DeepFactorized, CdfIsInsideUnitIntervalAndIncreasing) {
    fbm::Rng rng(1);
    const DeepFactorized f(DeepFactorizedParams::initial(3, rng));
    const double mid = f.cdf(0.0);
    EXPECT_GT(mid, 0.0);
    EXPECT_LT(mid, 1.0);
    EXPECT_LT(f.cdf(-20.0), f.cdf(20.0));
}

TEST(DeepFactorizedProperty, CdfMonotoneForRandomParameters) {
    fbm::Rng rng(2);
    for (int draw = 0; draw < 50; ++draw) {
        const DeepFactorized f(random_dfp(1 + std::size_t(draw % 8), rng));
        double prev = f.cdf(-30.0);
        for (int i = 1; i < 1000; ++i) {
            const double cur = f.cdf(-30.0 + 60.0 * i / 999.0);
            ASSERT_GE(cur, prev) << "draw " << draw;
            prev = cur;
        }
    }
}

TEST(DeepFactorizedProperty, DensityMatchesDerivativeOfCdf) {
    fbm::Rng rng(3);
    for (int draw = 0; draw < 10; ++draw) {
        const DeepFactorized f(random_dfp(5, rng));
        const double h = 1e-5;
        for (int i = 0; i < 10; ++i) {
            const double x = rng.uniform(-4.0, 4.0);
            const double fd = (f.cdf(x + h) - f.cdf(x - h)) / (2.0 * h);
            const double pdf = f.pdf(x);
            EXPECT_GE(pdf, 0.0);
            if (pdf > 1e-8) EXPECT_NEAR(pdf, fd, 1e-4 * pdf) << "x = " << x;
        }
    }
}

TEST(DeepFactorizedProperty, DensityIntegratesToOne) {
    fbm::Rng rng(4);
    for (int draw = 0; draw < 10; ++draw) {
        const DeepFactorized f(DeepFactorizedParams::initial(5, rng));
        // The initial CDF is spread wide, so integrate well past its bulk.
        double mass = 0.0;
        for (double lo = -400.0; lo < 400.0; lo += 20.0)
            mass += integrate([&](double x) { return f.pdf(x); }, lo, lo + 20.0);
        EXPECT_NEAR(mass, 1.0, 1e-6);
    }
}

TEST(DeepFactorized, BinProbabilityAgreesWithCdf) {
    fbm::Rng rng(5);
    const DeepFactorized f(random_dfp(3, rng));
    for (double lo : {-6.0, -1.0, 0.5, 3.0}) {
        EXPECT_NEAR(f.bin_probability(lo, lo + 1.0), f.cdf(lo + 1.0) - f.cdf(lo), 1e-14);
        EXPECT_GE(f.bin_probability(lo, lo + 1.0), 0.0);
    }
}

TEST(DeepFactorized, TracedLogDensityMatchesPlainAndPassesGradientCheck) {
    fbm::Rng rng(6);
    for (int draw = 0; draw < 5; ++draw) {
        const auto p = random_dfp(5, rng);
        std::vector<double> xs(32);
        for (auto& x : xs) x = rng.normal(0.0, 3.0);
        const DeepFactorized f(p);
        fbm::ad::Tape<double> tape;
        auto lp = fbm::dfp_log_prob(tape.variable(p.values), tape.constant(xs), 5);
        for (std::size_t i = 0; i < xs.size(); ++i)
            EXPECT_NEAR(lp.values()[i], f.log_prob(xs[i]), 1e-11);
        const auto check = fbm::ad::check_gradient(
            [&](auto& t, auto pv) { return -fbm::ad::mean(fbm::dfp_log_prob(pv, t.constant(xs), 5)); },
            p.values);
        EXPECT_LT(check.max_rel_error, 1e-5);
    }
}

TEST(DeepFactorized, JsonRoundTrip) {
    fbm::Rng rng(7);
    const auto p = random_dfp(4, rng);
    const auto q = nlohmann::json::parse(nlohmann::json(p).dump()).get<DeepFactorizedParams>();
    EXPECT_EQ(q.width, p.width);
    EXPECT_EQ(q.values, p.values);
}

TEST(GaussianMixture, HandExamples) {
    GaussianMixtureParams single;
    EXPECT_NEAR(fbm::gmm_logpdf(0.0, single), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);

    GaussianMixtureParams two;
    two.components = 2;
    two.values = {0.0, 0.0, -1.0, 1.0, 0.0, 0.0};
    const double unit_at_one = std::exp(-0.5) / std::sqrt(2.0 * std::numbers::pi);
    EXPECT_NEAR(fbm::gmm_logpdf(0.0, two), std::log(unit_at_one), 1e-15);
}

TEST(GaussianMixture, StableFarFromAllComponents) {
    GaussianMixtureParams p;
    p.components = 2;
    p.values = {0.0, 0.0, -1.0, 1.0, -3.0, -3.0};
    const double lp = fbm::gmm_logpdf(50.0, p);
    EXPECT_TRUE(std::isfinite(lp));
    // Dominated by the right component: log(1/2) + log N(50; 1, e^-3).
    const double s = std::exp(-3.0);
    const double expected = std::log(0.5) - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi) -
                            0.5 * (49.0 / s) * (49.0 / s);
    EXPECT_NEAR(lp, expected, 1e-9 * std::abs(expected));
}

TEST(GaussianMixtureProperty, DensityIntegratesToOne) {
    fbm::Rng rng(8);
    for (int draw = 0; draw < 20; ++draw) {
        const auto p = random_gmm(1 + std::size_t(draw % 6), rng);
        const fbm::GaussianMixture g(p);
        const double mass = integrate([&](double x) { return std::exp(g.log_prob(x)); }, -40.0, 40.0);
        EXPECT_NEAR(mass, 1.0, 1e-6);
    }
}

TEST(GaussianMixture, TracedMatchesPlainAndPassesGradientCheck) {
    fbm::Rng rng(9);
    for (int draw = 0; draw < 5; ++draw) {
        const auto p = random_gmm(4, rng);
        std::vector<double> xs(32);
        for (auto& x : xs) x = rng.normal(0.0, 4.0);
        fbm::ad::Tape<double> tape;
        auto lp = fbm::gmm_log_prob(tape.variable(p.values), tape.constant(xs), 4);
        for (std::size_t i = 0; i < xs.size(); ++i)
            EXPECT_NEAR(lp.values()[i], fbm::gmm_logpdf(xs[i], p), 1e-11);
        const auto check = fbm::ad::check_gradient(
            [&](auto& t, auto pv) { return -fbm::ad::mean(fbm::gmm_log_prob(pv, t.constant(xs), 4)); },
            p.values);
        EXPECT_LT(check.max_rel_error, 1e-5);
    }
}

TEST(GaussianMixture, InitialMeansSpanTheDataRange) {
    const auto p = GaussianMixtureParams::initial(5, -2.0, 6.0);
    const std::vector<double> means(p.means().begin(), p.means().end());
    EXPECT_EQ(means, (std::vector<double>{-2.0, 0.0, 2.0, 4.0, 6.0}));
    for (double v : p.log_scales()) EXPECT_EQ(v, 0.0);
    for (double v : p.logits()) EXPECT_EQ(v, 0.0);
}

TEST(Budgets, ParameterCountsAndClosestSizes) {
    using fbm::ModelKind;
    EXPECT_EQ(fbm::param_count(ModelKind::fbm, 20), 44u);
    EXPECT_EQ(fbm::param_count(ModelKind::gmm, 30), 90u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::fbm, 90), 43u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::dfp, 90), 5u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::gmm, 90), 30u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::fbm, 282), 139u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::dfp, 282), 10u);
    EXPECT_EQ(fbm::size_for_budget(ModelKind::gmm, 282), 94u);
    for (std::size_t budget : {90u, 282u}) {
        double lo = 1e9;
        double hi = 0.0;
        for (auto kind : {ModelKind::fbm, ModelKind::dfp, ModelKind::gmm}) {
            const double c = double(fbm::param_count(kind, fbm::size_for_budget(kind, budget)));
            lo = std::min(lo, c);
            hi = std::max(hi, c);
        }
        EXPECT_LT((hi - lo) / lo, 0.1) << "budget " << budget;
    }
}

TEST(DensityModel, JsonDispatchesOnModelType) {
    fbm::Rng rng(10);
    for (auto kind : {fbm::ModelKind::fbm, fbm::ModelKind::dfp, fbm::ModelKind::gmm}) {
        const auto m = fbm::DensityModel::create(kind, 4, rng);
        const auto back = nlohmann::json::parse(nlohmann::json(m).dump()).get<fbm::DensityModel>();
        EXPECT_EQ(back.kind, kind);
        EXPECT_EQ(back.size, 4u);
        EXPECT_EQ(back.params, m.params);
    }
}

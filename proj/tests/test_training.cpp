#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fbm/training.hpp"

using fbm::Domain;
using fbm::ModelKind;
using fbm::TrainConfig;

namespace {

fbm::TargetSpec standard_normal() {
    fbm::TargetSpec t;
    t.name = "normal";
    t.components = {{fbm::ComponentKind::gaussian, 0.0, 1.0, 1.0}};
    return t;
}

TrainConfig tiny_config() {
    TrainConfig c = TrainConfig::desk();
    c.epochs = 3;
    c.steps_per_epoch = 20;
    c.validation_batch = 256;
    c.kld_samples = 2000;
    c.kld_panels = 2048;
    return c;
}

}  // namespace

TEST(CosineLr, Endpoints) {
    EXPECT_DOUBLE_EQ(fbm::cosine_lr(0, 100, 0.3), 0.3);
    EXPECT_NEAR(fbm::cosine_lr(100, 100, 0.3), 0.0, 1e-18);
    EXPECT_NEAR(fbm::cosine_lr(50, 100, 0.3), 0.15, 1e-15);
    EXPECT_THROW(fbm::cosine_lr(101, 100, 0.3), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    for (double g : {1e-3, 0.5, -7.0}) {
        std::vector<double> p{2.0};
        fbm::AdamState state(1);
        fbm::adam_step(p, std::vector<double>{g}, state, 0.01);
        EXPECT_NEAR(std::abs(p[0] - 2.0), 0.01, 1e-6);
        EXPECT_LT((p[0] - 2.0) * g, 0.0);
    }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
    std::vector<double> p{1.0, -2.0, 3.0};
    const auto before = p;
    fbm::AdamState state(3);
    for (int i = 0; i < 10; ++i) fbm::adam_step(p, std::vector<double>(3, 0.0), state, 0.1);
    EXPECT_EQ(p, before);
}

TEST(Adam, ConvergesOnQuadratic) {
    std::vector<double> p{1.0};
    fbm::AdamState state(1);
    for (int i = 0; i < 100; ++i) fbm::adam_step(p, std::vector<double>{2.0 * p[0]}, state, 0.1);
    EXPECT_LT(std::abs(p[0]), 0.01);
}

TEST(Adam, RejectsNonFiniteGradient) {
    std::vector<double> p{1.0, 1.0};
    fbm::AdamState state(2);
    EXPECT_THROW(fbm::adam_step(p, std::vector<double>{0.0, NAN}, state, 0.1),
                 fbm::NonFiniteGradient);
}

TEST(TrainConfig, PresetsAndValidation) {
    const auto paper = TrainConfig::paper();
    EXPECT_EQ(paper.epochs, 500u);
    EXPECT_EQ(paper.steps_per_epoch, 500u);
    EXPECT_EQ(paper.batch_size, 128u);
    EXPECT_DOUBLE_EQ(paper.learning_rate, 1e-4);
    EXPECT_DOUBLE_EQ(paper.gamma, 1e-6);
    const auto desk = TrainConfig::desk();
    EXPECT_EQ(desk.epochs, 50u);
    EXPECT_EQ(desk.steps_per_epoch, 200u);

    TrainConfig c;
    EXPECT_THROW(fbm::apply_overrides(c, {{"epochs", 0}}), std::invalid_argument);
    EXPECT_THROW(fbm::apply_overrides(c, {{"learning_rate", -1.0}}), std::invalid_argument);
    EXPECT_THROW(fbm::apply_overrides(c, {{"gamma", -1.0}}), std::invalid_argument);
    EXPECT_THROW(fbm::apply_overrides(c, {{"bogus", 1}}), std::invalid_argument);
    EXPECT_EQ(c.epochs, 500u);  // failed updates leave the config untouched
    fbm::apply_overrides(c, {{"epochs", 7}});
    EXPECT_EQ(c.epochs, 7u);
}

TEST(Fit, UniformModelHasAnalyticNll) {
    // With N = 0 only the scale and offset move; at init the density is sech^2(x)/2.
    auto cfg = tiny_config();
    cfg.learning_rate = 1e-12;
    const auto report = fbm::fit(ModelKind::fbm, 0, standard_normal(), cfg);
    fbm::Rng rng = fbm::Rng::stream(cfg.seed, "train/validation");
    const auto val = fbm::sample(standard_normal(), cfg.validation_batch, rng);
    double nll = 0.0;
    for (double x : val) nll -= std::log(0.5 / (std::cosh(x) * std::cosh(x)));
    nll /= double(val.size());
    EXPECT_NEAR(report.epochs.back().nll, nll, 1e-9);
}

TEST(Fit, ReportHasOneEntryPerEpochAndFiniteMetrics) {
    const auto cfg = tiny_config();
    for (auto kind : {ModelKind::fbm, ModelKind::dfp, ModelKind::gmm}) {
        const auto r = fbm::fit(kind, 4, fbm::named_target("mix3gauss"), cfg);
        ASSERT_EQ(r.epochs.size(), cfg.epochs);
        for (std::size_t e = 0; e < r.epochs.size(); ++e) {
            EXPECT_EQ(r.epochs[e].epoch, e + 1);
            EXPECT_TRUE(std::isfinite(r.epochs[e].nll));
        }
        EXPECT_NEAR(r.epochs.back().lr, 0.0, 1e-18);
        ASSERT_TRUE(r.kld_mc.has_value());
        ASSERT_TRUE(r.kld_quadrature.has_value());
        EXPECT_TRUE(std::isfinite(*r.kld_quadrature));
    }
}

TEST(Fit, SameSeedGivesIdenticalReports) {
    const auto cfg = tiny_config();
    const auto a = fbm::fit(ModelKind::fbm, 6, fbm::named_target("mixbeta2"), cfg);
    const auto b = fbm::fit(ModelKind::fbm, 6, fbm::named_target("mixbeta2"), cfg);
    EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
    auto other = cfg;
    other.seed = 1;
    const auto c = fbm::fit(ModelKind::fbm, 6, fbm::named_target("mixbeta2"), other);
    EXPECT_NE(a.model.params, c.model.params);
}

TEST(Fit, FixedDatasetOverload) {
    auto cfg = tiny_config();
    std::vector<double> data = fbm::sample(standard_normal(), 500, 4);
    const auto r = fbm::fit(ModelKind::gmm, 2, data, Domain::real, cfg);
    EXPECT_EQ(r.epochs.size(), cfg.epochs);
    EXPECT_THROW(fbm::fit(ModelKind::gmm, 2, std::vector<double>{}, Domain::real, cfg),
                 std::invalid_argument);
}

TEST(FitSlow, SmallFourierModelLearnsStandardNormal) {
    const auto r = fbm::fit(ModelKind::fbm, 8, standard_normal(), TrainConfig::desk());
    EXPECT_LT(*r.kld_quadrature, 0.01);
    for (const auto& e : r.epochs) EXPECT_TRUE(std::isfinite(e.nll));
}

TEST(FitSlow, SmoothnessPenaltyIsAMildPrior) {
    auto with = TrainConfig::desk();
    auto without = with;
    without.gamma = 0.0;
    const auto target = fbm::named_target("mix3gauss");
    const double a = *fbm::fit(ModelKind::fbm, 32, target, with).kld_quadrature;
    const double b = *fbm::fit(ModelKind::fbm, 32, target, without).kld_quadrature;
    EXPECT_LT(std::abs(a - b), 0.05);
}

TEST(Fit, DivergenceRaisesWithSnapshot) {
    auto cfg = tiny_config();
    cfg.learning_rate = 1e6;
    try {
        fbm::fit(ModelKind::gmm, 3, fbm::named_target("mix3gauss"), cfg);
        SUCCEED() << "optimizer stayed finite";
    } catch (const fbm::TrainingDiverged& e) {
        EXPECT_EQ(e.snapshot().kind, ModelKind::gmm);
        for (double v : e.snapshot().params) EXPECT_TRUE(std::isfinite(v));
    }
}

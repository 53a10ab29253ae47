#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fbm/fourier_model.hpp"
#include "fbm/rng.hpp"

using fbm::ComplexSeq;
using fbm::Domain;
using fbm::FourierDensity;
using fbm::FourierDensityParams;

namespace {

constexpr double kPi = std::numbers::pi;

FourierDensityParams random_params(std::size_t n, fbm::Rng& rng, double s = 1.0, double t = 0.0) {
    FourierDensityParams p;
    p.a = ComplexSeq(n + 1);
    for (std::size_t k = 0; k <= n; ++k) {
        p.a.re[k] = rng.normal();
        p.a.im[k] = rng.normal();
    }
    p.s_raw = fbm::softplus_inverse(s);
    p.t = t;
    return p;
}

FourierDensityParams from_real(std::vector<double> re) {
    FourierDensityParams p;
    p.a = ComplexSeq(re, std::vector<double>(re.size(), 0.0));
    return p;
}

// A(x) = sum_k a_k exp(-i k pi x); the unnormalized density is |A(x)|^2.
std::complex<double> amplitude(const FourierDensityParams& p, double x) {
    std::complex<double> acc = 0.0;
    for (std::size_t k = 0; k < p.a.size(); ++k)
        acc += std::complex<double>(p.a.re[k], p.a.im[k]) * std::polar(1.0, -double(k) * kPi * x);
    return acc;
}

std::complex<double> amplitude_slope(const FourierDensityParams& p, double x) {
    std::complex<double> acc = 0.0;
    for (std::size_t k = 0; k < p.a.size(); ++k)
        acc += std::complex<double>(0.0, -double(k) * kPi) *
               std::complex<double>(p.a.re[k], p.a.im[k]) * std::polar(1.0, -double(k) * kPi * x);
    return acc;
}

double oracle_mass(const FourierDensityParams& p) {
    double c0 = 0.0;
    for (std::size_t k = 0; k < p.a.size(); ++k) c0 += p.a.re[k] * p.a.re[k] + p.a.im[k] * p.a.im[k];
    return 2.0 * c0;
}

template <class F>
double integrate(F&& f, double a, double b) {
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-13);
}

}  // namespace

TEST(Autocorrelate, SmallHandExamples) {
    const auto c1 = fbm::autocorrelate(ComplexSeq({1.0}, {0.0}));
    EXPECT_DOUBLE_EQ(c1.re[0], 1.0);
    const auto c2 = fbm::autocorrelate(ComplexSeq({1.0, 1.0}, {0.0, 0.0}));
    EXPECT_DOUBLE_EQ(c2.re[0], 2.0);
    EXPECT_DOUBLE_EQ(c2.re[1], 1.0);
    EXPECT_DOUBLE_EQ(c2.im[1], 0.0);
}

TEST(Autocorrelate, MatchesComplexArithmetic) {
    fbm::Rng rng(3);
    const auto p = random_params(9, rng);
    const auto c = fbm::autocorrelate(p.a);
    for (std::size_t n = 0; n <= 9; ++n) {
        std::complex<double> acc = 0.0;
        for (std::size_t k = 0; k + n <= 9; ++k)
            acc += std::complex<double>(p.a.re[k], p.a.im[k]) *
                   std::conj(std::complex<double>(p.a.re[k + n], p.a.im[k + n]));
        EXPECT_NEAR(c.re[n], acc.real(), 1e-12);
        EXPECT_NEAR(c.im[n], acc.imag(), 1e-12);
    }
}

TEST(AutocorrelateProperty, HermitianToeplitzIsPositiveSemidefinite) {
    fbm::Rng rng(11);
    for (int draw = 0; draw < 200; ++draw) {
        const std::size_t n = 1 + std::size_t(draw % 16);
        const auto c = fbm::autocorrelate(random_params(n, rng).a);
        Eigen::MatrixXcd t(n + 1, n + 1);
        for (std::size_t j = 0; j <= n; ++j)
            for (std::size_t k = 0; k <= n; ++k) {
                const std::size_t lag = j > k ? j - k : k - j;
                const std::complex<double> v(c.re[lag], c.im[lag]);
                t(Eigen::Index(j), Eigen::Index(k)) = j >= k ? v : std::conj(v);
            }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(t, Eigen::EigenvaluesOnly);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10 * std::max(1.0, c.re[0]));
    }
}

TEST(PdfPeriodic, HandExamples) {
    const FourierDensity uniform(from_real({1.0}));
    EXPECT_DOUBLE_EQ(uniform.pdf_periodic(0.3), 0.5);
    const FourierDensity two(from_real({1.0, 1.0}));
    EXPECT_DOUBLE_EQ(two.pdf_periodic(0.0), 1.0);
    EXPECT_NEAR(two.pdf_periodic(1.0 - 1e-9), 0.0, 1e-15);
    EXPECT_NEAR(two.pdf_periodic(-1.0 + 1e-9), 0.0, 1e-15);
    EXPECT_THROW(two.pdf_periodic(1.0), fbm::DomainError);
    EXPECT_THROW(two.pdf_periodic(-1.5), fbm::DomainError);
}

TEST(PdfPeriodic, EqualsNormalizedSquaredAmplitude) {
    fbm::Rng rng(5);
    for (int draw = 0; draw < 20; ++draw) {
        const auto p = random_params(7, rng);
        const FourierDensity f(p);
        for (double x : {-0.93, -0.41, 0.0, 0.27, 0.88}) {
            const double oracle = std::norm(amplitude(p, x)) / oracle_mass(p);
            EXPECT_NEAR(f.pdf_periodic(x), oracle, 1e-12 * std::max(1.0, oracle));
        }
    }
}

TEST(PdfPeriodic, CoefficientsRecoveredByProjection) {
    // c_n = (1/2) int f(x) exp(-i n pi x) dx with f = |A|^2.
    fbm::Rng rng(8);
    const auto p = random_params(6, rng);
    const auto c = fbm::autocorrelate(p.a);
    for (std::size_t n = 0; n <= 6; ++n) {
        const double re = 0.5 * integrate(
            [&](double x) { return std::norm(amplitude(p, x)) * std::cos(double(n) * kPi * x); },
            -1.0, 1.0);
        const double im = 0.5 * integrate(
            [&](double x) { return -std::norm(amplitude(p, x)) * std::sin(double(n) * kPi * x); },
            -1.0, 1.0);
        EXPECT_NEAR(re, c.re[n], 1e-8);
        EXPECT_NEAR(im, c.im[n], 1e-8);
    }
}

TEST(CdfPeriodic, EndpointsAreExact) {
    fbm::Rng rng(21);
    for (int draw = 0; draw < 50; ++draw) {
        const FourierDensity f(random_params(1 + std::size_t(draw), rng));
        EXPECT_EQ(f.cdf_periodic(-1.0), 0.0);
        EXPECT_EQ(f.cdf_periodic(1.0), 1.0);
    }
    EXPECT_THROW(FourierDensity(from_real({1.0})).cdf_periodic(1.01), fbm::DomainError);
}

TEST(CdfPeriodic, MatchesQuadratureOfDensity) {
    const FourierDensity two(from_real({1.0, 1.0}));
    EXPECT_DOUBLE_EQ(FourierDensity(from_real({1.0})).cdf_periodic(0.0), 0.5);
    const double q = integrate([&](double x) { return two.pdf_periodic(x); }, -1.0, 0.25);
    EXPECT_NEAR(two.cdf_periodic(0.25), q, 1e-8);

    fbm::Rng rng(4);
    for (int draw = 0; draw < 10; ++draw) {
        const auto p = random_params(12, rng);
        const FourierDensity f(p);
        for (double x : {-0.7, 0.05, 0.6}) {
            const double oracle =
                integrate([&](double u) { return std::norm(amplitude(p, u)); }, -1.0, x) /
                oracle_mass(p);
            EXPECT_NEAR(f.cdf_periodic(x), oracle, 1e-10);
        }
    }
}

TEST(PdfReal, HandExamples) {
    const FourierDensity uniform(from_real({1.0}));
    EXPECT_NEAR(uniform.pdf_real(0.0), 0.5, 1e-15);
    EXPECT_NEAR(integrate([&](double x) { return uniform.pdf_real(x); }, -20.0, 20.0), 1.0, 1e-8);
    EXPECT_NEAR(uniform.cdf_real(std::atanh(0.5)), 0.75, 1e-15);
}

TEST(PdfReal, MatchesDerivativeOfCdf) {
    auto p = from_real({1.0, 1.0});
    p.s_raw = fbm::softplus_inverse(2.0);
    p.t = 1.0;
    const FourierDensity f(p);
    const double h = 1e-5;
    for (double x : {-4.0, -2.2, -1.0, -0.3, 0.4, 1.0, 1.9, 2.6, 3.5, 5.0}) {
        const double fd = (f.cdf_real(x + h) - f.cdf_real(x - h)) / (2.0 * h);
        EXPECT_NEAR(f.pdf_real(x), fd, 1e-4 * f.pdf_real(x)) << "x = " << x;
    }
}

TEST(PdfReal, SymmetricRealCoefficientsCentreAtOffset) {
    auto p = from_real({1.0, 0.4, -0.2});
    p.t = 1.7;
    EXPECT_NEAR(FourierDensity(p).cdf_real(1.7), 0.5, 1e-15);
}

TEST(PdfRealProperty, IntegratesToOneForAnyScaleAndOffset) {
    fbm::Rng rng(31);
    for (int draw = 0; draw < 30; ++draw) {
        const double s = std::exp(rng.uniform(std::log(0.1), std::log(10.0)));
        const double t = rng.uniform(-5.0, 5.0);
        const FourierDensity f(random_params(8, rng, s, t));
        // Integrate in the tanh coordinate so the tails are covered exactly.
        const double mass = integrate(
            [&](double u) {
                const double z = std::atanh(u);
                return f.pdf_real(t + s * z) * s / (1.0 - u * u);
            },
            -1.0 + 1e-15, 1.0 - 1e-15);
        EXPECT_NEAR(mass, 1.0, 1e-6) << "s = " << s << " t = " << t;
    }
}

TEST(PdfRealProperty, CdfIsMonotoneOnSortedPoints) {
    fbm::Rng rng(41);
    for (int draw = 0; draw < 10; ++draw) {
        const FourierDensity f(random_params(20, rng, rng.uniform(0.5, 3.0), rng.uniform(-2.0, 2.0)));
        double prev = f.cdf_real(-40.0);
        for (int i = 1; i < 1000; ++i) {
            const double cur = f.cdf_real(-40.0 + 80.0 * i / 999.0);
            EXPECT_GE(cur, prev - 1e-12);
            prev = cur;
        }
    }
}

TEST(BinProbability, AgreesWithCdfDifferencesAndStaysPositiveInTails) {
    fbm::Rng rng(51);
    const auto p = random_params(10, rng, 1.5, 0.3);
    const FourierDensity f(p);
    for (double lo : {-3.0, -0.9, 0.1, 2.5}) {
        const double direct = f.cdf_real(lo + 1.0) - f.cdf_real(lo);
        EXPECT_NEAR(f.bin_probability(lo, lo + 1.0), direct, 1e-12);
    }
    // Far in the tails the CDF difference cancels to zero but the mass does not.
    for (double lo : {30.0, -31.0}) {
        const double mass = f.bin_probability(lo, lo + 1.0);
        const double oracle = integrate([&](double x) { return f.pdf_real(x); }, lo, lo + 1.0);
        EXPECT_GT(mass, 0.0);
        EXPECT_NEAR(mass, oracle, 1e-6 * oracle);
    }
}

TEST(Regularizer, HandExamples) {
    EXPECT_DOUBLE_EQ(fbm::regularizer(from_real({1.0}), 1.0), 0.0);
    EXPECT_NEAR(fbm::regularizer(from_real({1.0, 1.0}), 1.0), 4.0 * kPi * kPi, 1e-12);
    EXPECT_THROW(fbm::regularizer(from_real({1.0}), 0.0), std::invalid_argument);
}

TEST(RegularizerProperty, EqualsIntegralOfSquaredSlope) {
    fbm::Rng rng(61);
    for (int draw = 0; draw < 20; ++draw) {
        const auto p = random_params(8, rng);
        const double gamma = 1e-6;
        // f = |A|^2, f' = 2 Re(A' conj(A)).
        const double oracle = gamma * integrate(
            [&](double x) {
                const double d = 2.0 * std::real(amplitude_slope(p, x) * std::conj(amplitude(p, x)));
                return d * d;
            },
            -1.0, 1.0);
        EXPECT_NEAR(fbm::regularizer(p, gamma), oracle, 1e-6 * oracle);
    }
}

TEST(NegLogLikelihood, HandExamples) {
    const std::vector<double> xs{-0.9, 0.0, 0.5};
    EXPECT_NEAR(fbm::neg_log_likelihood(xs, from_real({1.0}), Domain::periodic), std::log(2.0), 1e-15);
    const std::vector<double> zero{0.0};
    EXPECT_NEAR(fbm::neg_log_likelihood(zero, from_real({1.0}), Domain::real), std::log(2.0), 1e-15);
    EXPECT_THROW(fbm::neg_log_likelihood(std::vector<double>{}, from_real({1.0}), Domain::real),
                 std::invalid_argument);
    EXPECT_THROW(fbm::neg_log_likelihood(std::vector<double>{1.0}, from_real({1.0}), Domain::periodic),
                 fbm::DomainError);
}

TEST(NegLogLikelihood, TracedValueMatchesPlainEvaluation) {
    fbm::Rng rng(71);
    for (Domain domain : {Domain::periodic, Domain::real}) {
        const auto p = random_params(9, rng, 1.3, -0.2);
        std::vector<double> xs(64);
        for (auto& x : xs) x = domain == Domain::periodic ? rng.uniform(-0.99, 0.99) : rng.normal(0.0, 2.0);
        fbm::ad::Tape<double> tape;
        auto pv = tape.variable(p.flat());
        auto xv = tape.constant(xs);
        const double traced = fbm::fbm_neg_log_likelihood(pv, xv, 9, domain).value();
        EXPECT_NEAR(traced, fbm::neg_log_likelihood(xs, p, domain), 1e-12);
    }
}

TEST(NegLogLikelihood, GradientPassesFiniteDifferenceCheck) {
    fbm::Rng rng(81);
    for (Domain domain : {Domain::periodic, Domain::real}) {
        for (int draw = 0; draw < 5; ++draw) {
            const auto p = random_params(6, rng, rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0));
            std::vector<double> xs(64);
            for (auto& x : xs)
                x = domain == Domain::periodic ? rng.uniform(-0.99, 0.99) : rng.normal(0.0, 1.5);
            const auto check = fbm::ad::check_gradient(
                [&](auto& tape, auto pv) {
                    return fbm::fbm_neg_log_likelihood(pv, tape.constant(xs), 6, domain);
                },
                p.flat());
            EXPECT_LT(check.max_rel_error, 1e-5) << to_string(domain) << " draw " << draw;
        }
    }
}

TEST(TracedCdf, MatchesPlainCdf) {
    fbm::Rng rng(91);
    const auto p = random_params(11, rng, 0.8, 0.5);
    const FourierDensity f(p);
    const std::vector<double> xs{-3.0, -0.4, 0.5, 1.1, 4.0};
    fbm::ad::Tape<double> tape;
    auto v = fbm::fbm_cdf_real(tape.variable(p.flat()), tape.constant(xs), 11);
    for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(v.values()[i], f.cdf_real(xs[i]), 1e-13);
}

TEST(Params, JsonRoundTripIsBitExact) {
    fbm::Rng rng(101);
    const auto p = random_params(13, rng, 0.37, -2.5);
    const auto text = nlohmann::json(p).dump();
    const auto q = nlohmann::json::parse(text).get<FourierDensityParams>();
    EXPECT_EQ(q.a.re, p.a.re);
    EXPECT_EQ(q.a.im, p.a.im);
    EXPECT_EQ(q.s_raw, p.s_raw);
    EXPECT_EQ(q.t, p.t);
}

TEST(Params, FlatLayoutRoundTripsAndCountsParameters) {
    fbm::Rng rng(111);
    const auto p = FourierDensityParams::initial(20, rng);
    EXPECT_EQ(p.param_count(), 44u);
    EXPECT_EQ(p.a.re[0], 1.0);
    EXPECT_NEAR(p.scale(), 1.0, 1e-15);
    const auto q = FourierDensityParams::from_flat(20, p.flat());
    EXPECT_EQ(q.flat(), p.flat());
    EXPECT_THROW(FourierDensityParams::from_flat(19, p.flat()), std::invalid_argument);
}

TEST(Params, ZeroAmplitudesStayFinite) {
    FourierDensityParams p;
    p.a = ComplexSeq(4);
    const FourierDensity f(p);
    EXPECT_TRUE(std::isfinite(f.pdf_periodic(0.2)));
    EXPECT_TRUE(std::isfinite(f.cdf_periodic(0.2)));
}

#pragma once

// Fourier basis density model.
//
// A density on (-1, 1) is represented by a truncated Fourier series whose
// coefficients c_n are the autocorrelation of free complex parameters a_n.
// The autocorrelation makes {c_n} positive semi-definite, hence the series
// f(x) = sum_n c_n exp(i n pi x) is non-negative, and the normalizer is 2 c_0.
// The real line is covered by pushing the periodic density through
// x = s * atanh(u) + t.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"
#include "fbm/rng.hpp"

namespace fbm {

enum class Domain { periodic, real };

inline const char* to_string(Domain d) { return d == Domain::periodic ? "periodic" : "real"; }

inline Domain parse_domain(const std::string& s) {
    if (s == "periodic") return Domain::periodic;
    if (s == "real") return Domain::real;
    throw std::invalid_argument("unknown domain: " + s);
}

/// Density floor applied inside every log-likelihood.
inline constexpr double kDensityFloor = 1e-30;

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Complex sequence stored as separate real and imaginary parts.
struct ComplexSeq {
    std::vector<double> re;
    std::vector<double> im;

    ComplexSeq() = default;
    explicit ComplexSeq(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
    ComplexSeq(std::vector<double> r, std::vector<double> i) : re(std::move(r)), im(std::move(i)) {
        if (re.size() != im.size())
            throw std::invalid_argument("ComplexSeq: real and imaginary lengths differ");
    }

    std::size_t size() const { return re.size(); }

    bool finite() const {
        for (std::size_t k = 0; k < re.size(); ++k)
            if (!std::isfinite(re[k]) || !std::isfinite(im[k])) return false;
        return true;
    }
};

/// c_n = sum_k a_k conj(a_{k+n}) for n = 0..N.
inline ComplexSeq autocorrelate(const ComplexSeq& a) {
    const std::size_t len = a.size();
    ComplexSeq c(len);
    for (std::size_t n = 0; n < len; ++n) {
        double re = 0.0;
        double im = 0.0;
        for (std::size_t k = 0; k + n < len; ++k) {
            re += a.re[k] * a.re[k + n] + a.im[k] * a.im[k + n];
            im += a.im[k] * a.re[k + n] - a.re[k] * a.im[k + n];
        }
        c.re[n] = re;
        c.im[n] = im;
    }
    return c;
}

/// sin(pi*y) and cos(pi*y), exact at integer and half-integer y.
inline std::pair<double, double> sincospi(double y) {
    double r = std::fmod(y, 2.0);
    if (r > 1.0) r -= 2.0;
    if (r < -1.0) r += 2.0;
    if (r == 0.0) return {0.0, 1.0};
    if (r == 1.0 || r == -1.0) return {0.0, -1.0};
    if (r == 0.5) return {1.0, 0.0};
    if (r == -0.5) return {-1.0, 0.0};
    const double theta = std::numbers::pi * r;
    return {std::sin(theta), std::cos(theta)};
}

inline double softplus_inverse(double y) {
    if (!(y > 0.0)) throw std::invalid_argument("softplus_inverse: argument must be positive");
    return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

/// Model parameters: a_0..a_N, scale pre-activation and offset.
struct FourierDensityParams {
    ComplexSeq a{std::vector<double>{1.0}, std::vector<double>{0.0}};
    double s_raw = softplus_inverse(1.0);
    double t = 0.0;
    double eps_c0 = 1e-20;

    std::size_t n() const { return a.size() - 1; }
    double scale() const { return ad::softplus(s_raw); }
    std::size_t param_count() const { return 2 * a.size() + 2; }

    /// Near-uniform start: a_0 = 1, a_n ~ Normal(0, 0.01/(N+1)) per slot.
    static FourierDensityParams initial(std::size_t n, Rng& rng, double scale = 1.0,
                                        double offset = 0.0) {
        FourierDensityParams p;
        p.a = ComplexSeq(n + 1);
        p.a.re[0] = 1.0;
        const double sd = 0.01 / double(n + 1);
        for (std::size_t k = 1; k <= n; ++k) {
            p.a.re[k] = rng.normal(0.0, sd);
            p.a.im[k] = rng.normal(0.0, sd);
        }
        p.s_raw = softplus_inverse(scale);
        p.t = offset;
        return p;
    }

    /// Flat layout [a_re(0..N), a_im(0..N), s_raw, t].
    std::vector<double> flat() const {
        std::vector<double> v;
        v.reserve(param_count());
        v.insert(v.end(), a.re.begin(), a.re.end());
        v.insert(v.end(), a.im.begin(), a.im.end());
        v.push_back(s_raw);
        v.push_back(t);
        return v;
    }

    static FourierDensityParams from_flat(std::size_t n, std::span<const double> v) {
        if (v.size() != 2 * (n + 1) + 2)
            throw std::invalid_argument("FourierDensityParams: flat vector has wrong length");
        FourierDensityParams p;
        p.a = ComplexSeq(std::vector<double>(v.begin(), v.begin() + std::ptrdiff_t(n + 1)),
                         std::vector<double>(v.begin() + std::ptrdiff_t(n + 1),
                                             v.begin() + std::ptrdiff_t(2 * n + 2)));
        p.s_raw = v[2 * n + 2];
        p.t = v[2 * n + 3];
        return p;
    }
};

inline void to_json(nlohmann::json& j, const FourierDensityParams& p) {
    j = nlohmann::json{{"model_type", "fbm"}, {"n", p.n()},         {"a_re", p.a.re},
                       {"a_im", p.a.im},      {"s_raw", p.s_raw}, {"t", p.t}};
}

inline void from_json(const nlohmann::json& j, FourierDensityParams& p) {
    if (j.contains("model_type") && j.at("model_type") != "fbm")
        throw std::invalid_argument("expected model_type \"fbm\"");
    const auto n = j.at("n").get<std::size_t>();
    auto re = j.at("a_re").get<std::vector<double>>();
    auto im = j.at("a_im").get<std::vector<double>>();
    if (re.size() != n + 1 || im.size() != n + 1)
        throw std::invalid_argument("fbm json: coefficient arrays must have n+1 entries");
    p.a = ComplexSeq(std::move(re), std::move(im));
    p.s_raw = j.at("s_raw").get<double>();
    p.t = j.at("t").get<double>();
}

/// Evaluator with the coefficient sequence precomputed.
class FourierDensity {
public:
    explicit FourierDensity(const FourierDensityParams& params)
        : n_(params.n()),
          c_(autocorrelate(params.a)),
          c0_(c_.re[0] + params.eps_c0),
          s_(params.scale()),
          t_(params.t) {}

    std::size_t n() const { return n_; }
    const ComplexSeq& coefficients() const { return c_; }
    double scale() const { return s_; }
    double offset() const { return t_; }

    /// Unnormalized series f(x) = c_0 + 2 sum_n Re[c_n exp(i n pi x)].
    double unnormalized(double x) const {
        double acc = 0.0;
        for (std::size_t k = 1; k <= n_; ++k) {
            const auto [s, c] = sincospi(double(k) * x);
            acc += c_.re[k] * c - c_.im[k] * s;
        }
        return c_.re[0] + 2.0 * acc;
    }

    double pdf_periodic(double x) const {
        if (!(std::abs(x) < 1.0)) throw DomainError("pdf_periodic: |x| must be < 1");
        return periodic_density(x);
    }

    double cdf_periodic(double x) const {
        if (!(x >= -1.0 && x <= 1.0)) throw DomainError("cdf_periodic: x must lie in [-1, 1]");
        return 0.5 * (x + 1.0) + (oscillation(x) - oscillation(-1.0));
    }

    double pdf_real(double x) const {
        const double z = (x - t_) / s_;
        const double sech = ad::sech2(z);
        if (sech == 0.0) return 0.0;
        return periodic_density(std::tanh(z)) * sech / s_;
    }

    double cdf_real(double x) const { return cdf_periodic(std::tanh((x - t_) / s_)); }

    double log_prob(double x, Domain domain) const {
        const double p = domain == Domain::periodic ? pdf_periodic(x) : pdf_real(x);
        return std::log(std::max(p, kDensityFloor));
    }

    /// Probability mass of [lo, hi] on the real line, accurate in the tails.
    double bin_probability(double lo, double hi) const {
        const double zl = (lo - t_) / s_;
        const double zh = (hi - t_) / s_;
        if (zl >= 0.0) {
            // Upper tail: 1 - tanh(z) = 2 / (1 + exp(2z)).
            return upper_tail(2.0 / (1.0 + std::exp(2.0 * zl))) -
                   upper_tail(2.0 / (1.0 + std::exp(2.0 * zh)));
        }
        if (zh <= 0.0) {
            return lower_tail(2.0 / (1.0 + std::exp(-2.0 * zh))) -
                   lower_tail(2.0 / (1.0 + std::exp(-2.0 * zl)));
        }
        return cdf_periodic(std::tanh(zh)) - cdf_periodic(std::tanh(zl));
    }

    double regularizer(double gamma) const {
        double acc = 0.0;
        for (std::size_t k = 1; k <= n_; ++k) {
            const double nk = double(k);
            acc += 4.0 * std::numbers::pi * std::numbers::pi * nk * nk *
                   (c_.re[k] * c_.re[k] + c_.im[k] * c_.im[k]);
        }
        return gamma * acc;
    }

private:
    double periodic_density(double x) const {
        double acc = 0.0;
        for (std::size_t k = 1; k <= n_; ++k) {
            const auto [s, c] = sincospi(double(k) * x);
            acc += c_.re[k] * c - c_.im[k] * s;
        }
        return 0.5 + acc / c0_;
    }

    // Oscillatory part of the antiderivative, sum_n Re[c_n e^{i n pi x} / (i pi n c_0)].
    double oscillation(double x) const {
        double acc = 0.0;
        for (std::size_t k = 1; k <= n_; ++k) {
            const auto [s, c] = sincospi(double(k) * x);
            acc += (c_.re[k] * s + c_.im[k] * c) / (std::numbers::pi * double(k));
        }
        return acc / c0_;
    }

    // P(1) - P(1 - w) for sign = +1, P(-1 + w) - P(-1) for sign = -1.
    double tail_mass(double w, double sign) const {
        double acc = 0.0;
        for (std::size_t k = 1; k <= n_; ++k) {
            const double s = sincospi(double(k) * w).first;
            const double h = sincospi(0.5 * double(k) * w).first;
            const double alt = k % 2 == 0 ? 1.0 : -1.0;
            acc += alt * (c_.re[k] * s + sign * c_.im[k] * 2.0 * h * h) /
                   (std::numbers::pi * double(k));
        }
        return 0.5 * w + acc / c0_;
    }
    double upper_tail(double w) const { return tail_mass(w, 1.0); }
    double lower_tail(double w) const { return tail_mass(w, -1.0); }

    std::size_t n_;
    ComplexSeq c_;
    double c0_;
    double s_;
    double t_;
};

inline double pdf_periodic(double x, const FourierDensityParams& p) {
    return FourierDensity(p).pdf_periodic(x);
}
inline double cdf_periodic(double x, const FourierDensityParams& p) {
    return FourierDensity(p).cdf_periodic(x);
}
inline double pdf_real(double x, const FourierDensityParams& p) {
    return FourierDensity(p).pdf_real(x);
}
inline double cdf_real(double x, const FourierDensityParams& p) {
    return FourierDensity(p).cdf_real(x);
}

/// gamma * sum_{n=-N..N} 2 pi^2 n^2 |c_n|^2.
inline double regularizer(const FourierDensityParams& p, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("regularizer: gamma must be positive");
    return FourierDensity(p).regularizer(gamma);
}

inline double neg_log_likelihood(std::span<const double> batch, const FourierDensityParams& p,
                                 Domain domain) {
    if (batch.empty()) throw std::invalid_argument("neg_log_likelihood: empty batch");
    const FourierDensity model(p);
    double acc = 0.0;
    for (double x : batch) acc -= model.log_prob(x, domain);
    return acc / double(batch.size());
}

// Traced counterparts. `params` is the flat layout of FourierDensityParams.

template <class T>
struct TracedCoefficients {
    ad::Var<T> c0;  // c_0 + eps, 1x1
    ad::Var<T> re;  // Re c_1..c_N, N x 1 (absent when N == 0)
    ad::Var<T> im;
};

template <class T>
ad::Var<T> fbm_a_re(ad::Var<T> params, std::size_t n) { return ad::slice(params, 0, n + 1); }
template <class T>
ad::Var<T> fbm_a_im(ad::Var<T> params, std::size_t n) { return ad::slice(params, n + 1, n + 1); }

/// Autocorrelation traced as real dot products; returns (Re c, Im c) for lags 0..N.
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> traced_autocorrelate(ad::Var<T> a_re, ad::Var<T> a_im) {
    const std::size_t len = a_re.size();
    std::vector<ad::Var<T>> re;
    std::vector<ad::Var<T>> im;
    re.reserve(len);
    im.reserve(len);
    for (std::size_t n = 0; n < len; ++n) {
        const std::size_t m = len - n;
        auto rl = ad::slice(a_re, 0, m);
        auto il = ad::slice(a_im, 0, m);
        auto rh = ad::slice(a_re, n, m);
        auto ih = ad::slice(a_im, n, m);
        re.push_back(ad::dot(rl, rh) + ad::dot(il, ih));
        im.push_back(ad::dot(il, rh) - ad::dot(rl, ih));
    }
    return {ad::concat(re), ad::concat(im)};
}

template <class T>
TracedCoefficients<T> traced_coefficients(ad::Var<T> params, std::size_t n, double eps_c0) {
    auto [cre, cim] = traced_autocorrelate(fbm_a_re(params, n), fbm_a_im(params, n));
    TracedCoefficients<T> tc;
    tc.c0 = ad::slice(cre, 0, 1) + eps_c0;
    if (n > 0) {
        tc.re = ad::slice(cre, 1, n);
        tc.im = ad::slice(cim, 1, n);
    }
    return tc;
}

namespace detail {

template <class T>
ad::Var<T> frequency_row(ad::Tape<T>& tape, std::size_t n, double factor) {
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = factor * double(k + 1);
    return tape.constant(std::span<const double>(w), 1, n);
}

template <class T>
ad::Var<T> weight_column(ad::Tape<T>& tape, std::size_t n, auto&& fn) {
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = fn(k + 1);
    return tape.constant(std::span<const double>(w), n, 1);
}

}  // namespace detail

/// Per-sample log density for a column of samples `x` (B x 1).
template <class T>
ad::Var<T> fbm_log_prob(ad::Var<T> params, ad::Var<T> x, std::size_t n, Domain domain,
                        double eps_c0 = 1e-20) {
    ad::Tape<T>& tape = *params.tape();
    const std::size_t batch = x.size();
    ad::Var<T> density;
    if (domain == Domain::periodic) {
        if (n == 0) {
            density = tape.fill(T(0.5), batch, 1);
        } else {
            const auto xs = x.values();
            std::vector<double> cs(batch * n);
            std::vector<double> sn(batch * n);
            for (std::size_t b = 0; b < batch; ++b) {
                const double xb = static_cast<double>(xs[b]);
                if (!(std::abs(xb) < 1.0))
                    throw DomainError("periodic log-likelihood: |x| must be < 1");
                for (std::size_t k = 0; k < n; ++k) {
                    const auto [s, c] = sincospi(double(k + 1) * xb);
                    cs[b * n + k] = c;
                    sn[b * n + k] = s;
                }
            }
            auto tc = traced_coefficients(params, n, eps_c0);
            auto cos_m = tape.constant(std::span<const double>(cs), batch, n);
            auto sin_m = tape.constant(std::span<const double>(sn), batch, n);
            auto series = ad::matmul(cos_m, tc.re) - ad::matmul(sin_m, tc.im);
            density = 0.5 + series / tc.c0;
        }
    } else {
        auto s = ad::softplus(ad::slice(params, 2 * n + 2, 1));
        auto t = ad::slice(params, 2 * n + 3, 1);
        auto z = (x - t) / s;
        ad::Var<T> base;
        if (n == 0) {
            base = tape.fill(T(0.5), batch, 1);
        } else {
            auto tc = traced_coefficients(params, n, eps_c0);
            auto theta = ad::tanh(z) * detail::frequency_row(tape, n, std::numbers::pi);
            auto series = ad::matmul(ad::cos(theta), tc.re) - ad::matmul(ad::sin(theta), tc.im);
            base = 0.5 + series / tc.c0;
        }
        density = base * ad::sech2(z) / s;
    }
    return ad::log(ad::floor(density, kDensityFloor));
}

/// Real-line CDF for a column of points (B x 1).
template <class T>
ad::Var<T> fbm_cdf_real(ad::Var<T> params, ad::Var<T> x, std::size_t n, double eps_c0 = 1e-20) {
    ad::Tape<T>& tape = *params.tape();
    auto s = ad::softplus(ad::slice(params, 2 * n + 2, 1));
    auto t = ad::slice(params, 2 * n + 3, 1);
    auto u = ad::tanh((x - t) / s);
    auto linear = (u + 1.0) * 0.5;
    if (n == 0) return linear;
    auto tc = traced_coefficients(params, n, eps_c0);
    const double pi = std::numbers::pi;
    auto inv_freq = detail::weight_column(tape, n, [&](std::size_t k) { return 1.0 / (pi * k); });
    auto alt = detail::weight_column(tape, n, [&](std::size_t k) {
        return (k % 2 == 0 ? 1.0 : -1.0) / (pi * double(k));
    });
    auto theta = u * detail::frequency_row(tape, n, pi);
    auto osc = ad::matmul(ad::sin(theta), tc.re * inv_freq) +
               ad::matmul(ad::cos(theta), tc.im * inv_freq) - ad::dot(tc.im, alt);
    return linear + osc / tc.c0;
}

template <class T>
ad::Var<T> fbm_regularizer(ad::Var<T> params, std::size_t n, double gamma) {
    ad::Tape<T>& tape = *params.tape();
    if (n == 0) return tape.scalar(T(0));
    auto tc = traced_coefficients(params, n, 0.0);
    const double pi2 = std::numbers::pi * std::numbers::pi;
    auto w = detail::weight_column(tape, n, [&](std::size_t k) {
        return gamma * 4.0 * pi2 * double(k) * double(k);
    });
    return ad::sum(w * (tc.re * tc.re + tc.im * tc.im));
}

template <class T>
ad::Var<T> fbm_neg_log_likelihood(ad::Var<T> params, ad::Var<T> x, std::size_t n,
                                  Domain domain) {
    if (x.size() == 0) throw std::invalid_argument("neg_log_likelihood: empty batch");
    return -ad::mean(fbm_log_prob(params, x, n, domain));
}

}  // namespace fbm

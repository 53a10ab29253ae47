#pragma once

// Benchmark target distributions and KL-divergence estimators.
//
// Beta and logit-normal components live on (0, 1) and are mapped affinely
// onto the periodic support (-1, 1); their log-density carries the -log 2
// Jacobian of that map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/fourier_model.hpp"
#include "fbm/quadrature.hpp"
#include "fbm/rng.hpp"

namespace fbm {

enum class ComponentKind { gaussian, laplacian, beta, logit_normal };

inline const char* to_string(ComponentKind k) {
    switch (k) {
        case ComponentKind::gaussian: return "gaussian";
        case ComponentKind::laplacian: return "laplacian";
        case ComponentKind::beta: return "beta";
        case ComponentKind::logit_normal: return "logit-normal";
    }
    return "?";
}

inline ComponentKind parse_component_kind(const std::string& s) {
    if (s == "gaussian") return ComponentKind::gaussian;
    if (s == "laplacian") return ComponentKind::laplacian;
    if (s == "beta") return ComponentKind::beta;
    if (s == "logit-normal") return ComponentKind::logit_normal;
    throw std::invalid_argument("unknown component kind: " + s);
}

/// One mixture component. Parameters by kind:
/// gaussian (mean, stddev), laplacian (location, scale),
/// beta (alpha, beta), logit-normal (mu, sigma).
struct Component {
    ComponentKind kind = ComponentKind::gaussian;
    double p1 = 0.0;
    double p2 = 1.0;
    double weight = 1.0;
};

class InvalidTarget : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TargetSpec {
    std::string name;
    std::vector<Component> components;
    Domain support = Domain::real;
    std::uint64_t seed = 0;

    void validate() const {
        if (components.empty()) throw InvalidTarget("target has no components");
        double total = 0.0;
        for (const auto& c : components) {
            if (!(c.weight > 0.0)) throw InvalidTarget("component weights must be positive");
            if (!(c.p2 > 0.0) || !std::isfinite(c.p1))
                throw InvalidTarget("invalid component parameters");
            if ((c.kind == ComponentKind::beta || c.kind == ComponentKind::logit_normal) &&
                support != Domain::periodic)
                throw InvalidTarget("beta and logit-normal components need periodic support");
            if (c.kind == ComponentKind::beta && !(c.p1 > 0.0))
                throw InvalidTarget("beta parameters must be positive");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-9) throw InvalidTarget("component weights must sum to 1");
    }
};

inline void to_json(nlohmann::json& j, const Component& c) {
    j = nlohmann::json{{"kind", to_string(c.kind)}, {"p1", c.p1}, {"p2", c.p2}, {"weight", c.weight}};
}
inline void from_json(const nlohmann::json& j, Component& c) {
    c.kind = parse_component_kind(j.at("kind").get<std::string>());
    c.p1 = j.at("p1").get<double>();
    c.p2 = j.at("p2").get<double>();
    c.weight = j.at("weight").get<double>();
}
inline void to_json(nlohmann::json& j, const TargetSpec& t) {
    j = nlohmann::json{{"name", t.name},
                       {"components", t.components},
                       {"support", to_string(t.support)},
                       {"seed", t.seed}};
}
inline void from_json(const nlohmann::json& j, TargetSpec& t) {
    t.name = j.value("name", std::string("custom"));
    t.components = j.at("components").get<std::vector<Component>>();
    t.support = parse_domain(j.at("support").get<std::string>());
    t.seed = j.value("seed", std::uint64_t{0});
    t.validate();
}

namespace detail {

inline double sample_component(const Component& c, Rng& rng) {
    auto to_periodic = [](double y) {
        const double x = 2.0 * y - 1.0;
        return std::clamp(x, std::nextafter(-1.0, 0.0), std::nextafter(1.0, 0.0));
    };
    switch (c.kind) {
        case ComponentKind::gaussian: return rng.normal(c.p1, c.p2);
        case ComponentKind::laplacian: return rng.laplace(c.p1, c.p2);
        case ComponentKind::beta: return to_periodic(rng.beta(c.p1, c.p2));
        case ComponentKind::logit_normal: return to_periodic(ad::sigmoid(rng.normal(c.p1, c.p2)));
    }
    return 0.0;
}

inline double component_logpdf(const Component& c, double x) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    switch (c.kind) {
        case ComponentKind::gaussian: {
            const double z = (x - c.p1) / c.p2;
            return -0.5 * z * z - std::log(c.p2) - 0.5 * std::log(2.0 * std::numbers::pi);
        }
        case ComponentKind::laplacian:
            return -std::abs(x - c.p1) / c.p2 - std::log(2.0 * c.p2);
        case ComponentKind::beta: {
            if (!(x > -1.0 && x < 1.0)) return -inf;
            const double y = 0.5 * (x + 1.0);
            const double lbeta = std::lgamma(c.p1) + std::lgamma(c.p2) - std::lgamma(c.p1 + c.p2);
            return (c.p1 - 1.0) * std::log(y) + (c.p2 - 1.0) * std::log1p(-y) - lbeta -
                   std::numbers::ln2;
        }
        case ComponentKind::logit_normal: {
            if (!(x > -1.0 && x < 1.0)) return -inf;
            const double y = 0.5 * (x + 1.0);
            const double z = (std::log(y) - std::log1p(-y) - c.p1) / c.p2;
            return -0.5 * z * z - std::log(c.p2) - 0.5 * std::log(2.0 * std::numbers::pi) -
                   std::log(y) - std::log1p(-y) - std::numbers::ln2;
        }
    }
    return -inf;
}

}  // namespace detail

/// n i.i.d. draws using the supplied stream.
inline std::vector<double> sample(const TargetSpec& spec, std::size_t n, Rng& rng) {
    spec.validate();
    std::vector<double> cumulative;
    double acc = 0.0;
    for (const auto& c : spec.components) cumulative.push_back(acc += c.weight);
    std::vector<double> out(n);
    for (auto& x : out) {
        const double u = rng.uniform() * acc;
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        const auto k = std::min<std::size_t>(std::size_t(it - cumulative.begin()),
                                             spec.components.size() - 1);
        x = detail::sample_component(spec.components[k], rng);
    }
    return out;
}

inline std::vector<double> sample(const TargetSpec& spec, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample: n must be at least 1");
    Rng rng = Rng::stream(seed, "target/sample");
    return sample(spec, n, rng);
}

/// Exact mixture log-density; -infinity outside the support.
inline double true_logpdf(const TargetSpec& spec, double x) {
    if (spec.support == Domain::periodic && !(x > -1.0 && x < 1.0))
        return -std::numeric_limits<double>::infinity();
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(spec.components.size());
    for (const auto& c : spec.components) {
        terms.push_back(std::log(c.weight) + detail::component_logpdf(c, x));
        m = std::max(m, terms.back());
    }
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - m);
    return m + std::log(acc);
}

enum class MixtureFamily { gaussians, gauss_laplace };

/// Scale of each component in a random K-Gaussian mixture.
inline double random_mixture_scale(std::size_t k) { return 10.0 / (2.0 * double(k)); }

/// Randomized benchmark mixtures with means drawn uniformly from [-10, 10].
///
/// gaussians: K equal-weight components with stddev 10/(2K).
/// gauss_laplace: 20 Gaussian and 20 Laplacian components whose scales are
/// 10/(2*40) times a Uniform(0.5, 1.5) factor, with Dirichlet(1) weights.
inline TargetSpec random_mixture(MixtureFamily family, std::size_t k, std::uint64_t seed) {
    TargetSpec spec;
    spec.support = Domain::real;
    spec.seed = seed;
    if (family == MixtureFamily::gaussians) {
        if (k == 0) throw InvalidTarget("random mixture needs K >= 1");
        Rng rng = Rng::stream(seed, "target/gaussians");
        spec.name = "randK:" + std::to_string(k) + ":" + std::to_string(seed);
        for (std::size_t i = 0; i < k; ++i)
            spec.components.push_back(
                {ComponentKind::gaussian, rng.uniform(-10.0, 10.0), random_mixture_scale(k),
                 1.0 / double(k)});
    } else {
        Rng rng = Rng::stream(seed, "target/gauss-laplace");
        spec.name = "gl2020:" + std::to_string(seed);
        const std::size_t per_family = 20;
        double total = 0.0;
        for (std::size_t i = 0; i < 2 * per_family; ++i) {
            Component c;
            c.kind = i < per_family ? ComponentKind::gaussian : ComponentKind::laplacian;
            c.p1 = rng.uniform(-10.0, 10.0);
            c.p2 = random_mixture_scale(2 * per_family) * rng.uniform(0.5, 1.5);
            c.weight = rng.exponential();
            total += c.weight;
            spec.components.push_back(c);
        }
        for (auto& c : spec.components) c.weight /= total;
    }
    spec.validate();
    return spec;
}

/// Built-in benchmark targets by name.
///
///   mixbeta2          two mapped beta components on (-1, 1)
///   mixlogitnormal    two mapped logit-normal components on (-1, 1)
///   mix3gauss         three Gaussians on the real line
///   mixgausslaplace   one Gaussian and one Laplacian on the real line
///   randK:<K>:<seed>  random K-Gaussian mixture
///   gl2020:<seed>     random 20 Gaussian + 20 Laplacian mixture
inline TargetSpec named_target(const std::string& name) {
    TargetSpec spec;
    spec.name = name;
    using CK = ComponentKind;
    if (name == "mixbeta2") {
        spec.support = Domain::periodic;
        spec.components = {{CK::beta, 2.0, 6.0, 0.45}, {CK::beta, 7.0, 3.0, 0.55}};
    } else if (name == "mixlogitnormal") {
        spec.support = Domain::periodic;
        spec.components = {{CK::logit_normal, -1.2, 0.6, 0.5}, {CK::logit_normal, 1.0, 0.4, 0.5}};
    } else if (name == "mix3gauss") {
        spec.support = Domain::real;
        spec.components = {{CK::gaussian, -2.5, 0.5, 0.3},
                           {CK::gaussian, 0.0, 0.7, 0.45},
                           {CK::gaussian, 2.0, 0.4, 0.25}};
    } else if (name == "mixgausslaplace") {
        spec.support = Domain::real;
        spec.components = {{CK::gaussian, -2.0, 0.8, 0.5}, {CK::laplacian, 1.5, 0.5, 0.5}};
    } else {
        auto fields = [&](const std::string& prefix) {
            std::vector<std::uint64_t> out;
            std::stringstream ss(name.substr(prefix.size()));
            std::string item;
            while (std::getline(ss, item, ':')) {
                if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
                    throw InvalidTarget("malformed target name: " + name);
                out.push_back(std::stoull(item));
            }
            return out;
        };
        if (name.rfind("randK:", 0) == 0) {
            const auto f = fields("randK:");
            if (f.size() != 2) throw InvalidTarget("expected randK:<K>:<seed>");
            return random_mixture(MixtureFamily::gaussians, f[0], f[1]);
        }
        if (name.rfind("gl2020:", 0) == 0) {
            const auto f = fields("gl2020:");
            if (f.size() != 1) throw InvalidTarget("expected gl2020:<seed>");
            return random_mixture(MixtureFamily::gauss_laplace, 40, f[0]);
        }
        throw InvalidTarget("unknown target: " + name);
    }
    spec.validate();
    return spec;
}

struct KldEstimate {
    double kld = 0.0;
    double stderr_ = 0.0;
};

class NonFiniteModelError : public std::runtime_error {
public:
    explicit NonFiniteModelError(double x)
        : std::runtime_error(describe(x)), x_(x) {}
    double x() const noexcept { return x_; }

private:
    static std::string describe(double x) {
        std::ostringstream os;
        os.precision(17);
        os << "model log-density is not finite at x = " << x;
        return os.str();
    }
    double x_;
};

using LogDensity = std::function<double(double)>;

/// Mean and standard error of log p(x) - log q(x) over n target draws.
inline KldEstimate kld_monte_carlo(const TargetSpec& spec, const LogDensity& model_logpdf,
                                   std::size_t n, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("kld_monte_carlo: n must be at least 2");
    Rng rng = Rng::stream(seed, "kld/monte-carlo");
    const auto xs = sample(spec, n, rng);
    double mean = 0.0;
    double m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double q = model_logpdf(xs[i]);
        if (!std::isfinite(q)) throw NonFiniteModelError(xs[i]);
        const double d = true_logpdf(spec, xs[i]) - q;
        const double delta = d - mean;
        mean += delta / double(i + 1);
        m2 += delta * (d - mean);
    }
    const double var = m2 / double(n - 1);
    return {mean, std::sqrt(var / double(n))};
}

/// Integration window used for real-line targets.
inline constexpr double kRealWindow = 30.0;
inline constexpr std::size_t kDefaultPanels = std::size_t(1) << 14;

/// Integral of p log(p/q) by composite Simpson over the support.
inline double kld_quadrature(const TargetSpec& spec, const LogDensity& model_logpdf,
                             std::size_t panels = kDefaultPanels) {
    const double lo = spec.support == Domain::periodic ? -1.0 : -kRealWindow;
    const double hi = -lo;
    return simpson(
        [&](double x) {
            const double lp = true_logpdf(spec, x);
            if (!std::isfinite(lp)) return 0.0;
            const double p = std::exp(lp);
            if (p == 0.0) return 0.0;
            return p * (lp - model_logpdf(x));
        },
        lo, hi, panels);
}

}  // namespace fbm

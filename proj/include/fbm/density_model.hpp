#pragma once

// Uniform handle over the three trainable density families. Every model is a
// flat parameter vector plus a size hyperparameter (N, M or K); the traced
// log-density and the plain evaluator read the same layout.

#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"
#include "fbm/deep_factorized.hpp"
#include "fbm/fourier_model.hpp"
#include "fbm/gaussian_mixture.hpp"
#include "fbm/rng.hpp"

namespace fbm {

enum class ModelKind { fbm, dfp, gmm };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::fbm: return "fbm";
        case ModelKind::dfp: return "dfp";
        case ModelKind::gmm: return "gmm";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "fbm") return ModelKind::fbm;
    if (s == "dfp") return ModelKind::dfp;
    if (s == "gmm") return ModelKind::gmm;
    throw std::invalid_argument("unknown model kind: " + s);
}

/// Exact trainable-scalar count: FBM 2(N+1)+2, DFP 2M^2+8M+1, GMM 3K.
inline std::size_t param_count(ModelKind kind, std::size_t size) {
    switch (kind) {
        case ModelKind::fbm: return 2 * (size + 1) + 2;
        case ModelKind::dfp: return DeepFactorizedParams::param_count(size);
        case ModelKind::gmm: return GaussianMixtureParams::param_count(size);
    }
    return 0;
}

/// Size hyperparameter whose parameter count is closest to `budget`.
inline std::size_t size_for_budget(ModelKind kind, std::size_t budget) {
    const std::size_t lo = kind == ModelKind::fbm ? 0 : 1;
    std::size_t best = lo;
    auto gap = [&](std::size_t s) {
        const auto c = double(param_count(kind, s));
        return std::abs(c - double(budget));
    };
    for (std::size_t s = lo; param_count(kind, s) <= 2 * budget + 8; ++s)
        if (gap(s) < gap(best)) best = s;
    return best;
}

/// Initialization knobs; the data range feeds the mixture means.
struct ModelInit {
    double fbm_scale = 1.0;
    double fbm_offset = 0.0;
    double dfp_init_scale = 10.0;
    double data_lo = -1.0;
    double data_hi = 1.0;
};

struct DensityModel {
    ModelKind kind = ModelKind::fbm;
    std::size_t size = 0;
    std::vector<double> params;
    double eps_c0 = 1e-20;

    std::size_t param_count() const { return fbm::param_count(kind, size); }

    static DensityModel create(ModelKind kind, std::size_t size, Rng& rng,
                               const ModelInit& init = {}) {
        DensityModel m;
        m.kind = kind;
        m.size = size;
        switch (kind) {
            case ModelKind::fbm:
                m.params = FourierDensityParams::initial(size, rng, init.fbm_scale, init.fbm_offset)
                               .flat();
                break;
            case ModelKind::dfp:
                m.params = DeepFactorizedParams::initial(size, rng, init.dfp_init_scale).values;
                break;
            case ModelKind::gmm:
                m.params = GaussianMixtureParams::initial(size, init.data_lo, init.data_hi).values;
                break;
        }
        return m;
    }

    FourierDensityParams fourier() const {
        auto p = FourierDensityParams::from_flat(size, params);
        p.eps_c0 = eps_c0;
        return p;
    }
    DeepFactorizedParams deep_factorized() const { return {size, params}; }
    GaussianMixtureParams mixture() const { return {size, params}; }

    /// Traced per-sample log density of a column of samples.
    template <class T>
    ad::Var<T> log_prob(ad::Var<T> p, ad::Var<T> x, Domain domain) const {
        switch (kind) {
            case ModelKind::fbm: return fbm_log_prob(p, x, size, domain, eps_c0);
            case ModelKind::dfp: return dfp_log_prob(p, x, size);
            case ModelKind::gmm: return gmm_log_prob(p, x, size);
        }
        throw std::logic_error("unreachable");
    }

    /// Smoothness penalty; only the Fourier model carries one.
    template <class T>
    ad::Var<T> penalty(ad::Var<T> p, double gamma) const {
        if (kind != ModelKind::fbm || gamma == 0.0) return p.tape()->scalar(T(0));
        return fbm_regularizer(p, size, gamma);
    }

    /// Traced mean negative log-likelihood plus penalty.
    template <class T>
    ad::Var<T> loss(ad::Var<T> p, ad::Var<T> x, Domain domain, double gamma) const {
        if (x.size() == 0) throw std::invalid_argument("loss: empty batch");
        return penalty(p, gamma) - ad::mean(log_prob(p, x, domain));
    }

    /// Plain log-density evaluator with precomputed internals.
    std::function<double(double)> log_density(Domain domain) const {
        switch (kind) {
            case ModelKind::fbm: {
                FourierDensity f(fourier());
                return [f, domain](double x) { return f.log_prob(x, domain); };
            }
            case ModelKind::dfp: {
                DeepFactorized f(deep_factorized());
                return [f](double x) { return f.log_prob(x); };
            }
            case ModelKind::gmm: {
                GaussianMixture f(mixture());
                return [f](double x) { return f.log_prob(x); };
            }
        }
        throw std::logic_error("unreachable");
    }

    /// Plain density (no floor).
    std::function<double(double)> density(Domain domain) const {
        switch (kind) {
            case ModelKind::fbm: {
                FourierDensity f(fourier());
                return [f, domain](double x) {
                    return domain == Domain::periodic ? f.pdf_periodic(x) : f.pdf_real(x);
                };
            }
            case ModelKind::dfp: {
                DeepFactorized f(deep_factorized());
                return [f](double x) { return f.pdf(x); };
            }
            case ModelKind::gmm: {
                GaussianMixture f(mixture());
                return [f](double x) { return std::exp(f.log_prob(x)); };
            }
        }
        throw std::logic_error("unreachable");
    }
};

inline void to_json(nlohmann::json& j, const DensityModel& m) {
    switch (m.kind) {
        case ModelKind::fbm: j = m.fourier(); break;
        case ModelKind::dfp: j = m.deep_factorized(); break;
        case ModelKind::gmm: j = m.mixture(); break;
    }
}

inline void from_json(const nlohmann::json& j, DensityModel& m) {
    m.kind = parse_model_kind(j.value("model_type", std::string("fbm")));
    switch (m.kind) {
        case ModelKind::fbm: {
            auto p = j.get<FourierDensityParams>();
            m.size = p.n();
            m.params = p.flat();
            break;
        }
        case ModelKind::dfp: {
            auto p = j.get<DeepFactorizedParams>();
            m.size = p.width;
            m.params = std::move(p.values);
            break;
        }
        case ModelKind::gmm: {
            auto p = j.get<GaussianMixtureParams>();
            m.size = p.components;
            m.params = std::move(p.values);
            break;
        }
    }
}

}  // namespace fbm

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"

namespace fbm {

/// Gaussian mixture with flat layout [logits(K), means(K), log_scales(K)].
struct GaussianMixtureParams {
    std::size_t components = 1;
    std::vector<double> values{0.0, 0.0, 0.0};

    static std::size_t param_count(std::size_t k) { return 3 * k; }
    std::size_t param_count() const { return param_count(components); }

    std::span<const double> logits() const { return {values.data(), components}; }
    std::span<const double> means() const { return {values.data() + components, components}; }
    std::span<const double> log_scales() const {
        return {values.data() + 2 * components, components};
    }

    /// Means evenly spread over [lo, hi], unit scales, uniform weights.
    static GaussianMixtureParams initial(std::size_t k, double lo, double hi) {
        if (k == 0) throw std::invalid_argument("mixture needs at least one component");
        GaussianMixtureParams p;
        p.components = k;
        p.values.assign(3 * k, 0.0);
        for (std::size_t i = 0; i < k; ++i)
            p.values[k + i] = k == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * double(i) / double(k - 1);
        return p;
    }
};

inline void to_json(nlohmann::json& j, const GaussianMixtureParams& p) {
    j = nlohmann::json{{"model_type", "gmm"}, {"k", p.components}, {"values", p.values}};
}

inline void from_json(const nlohmann::json& j, GaussianMixtureParams& p) {
    if (j.at("model_type") != "gmm") throw std::invalid_argument("expected model_type \"gmm\"");
    p.components = j.at("k").get<std::size_t>();
    p.values = j.at("values").get<std::vector<double>>();
    if (p.values.size() != p.param_count())
        throw std::invalid_argument("gmm json: wrong number of values");
}

inline double logsumexp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double x : v) acc += std::exp(x - m);
    return m + std::log(acc);
}

class GaussianMixture {
public:
    explicit GaussianMixture(const GaussianMixtureParams& p)
        : means_(p.means().begin(), p.means().end()), scales_(p.components),
          offsets_(p.components) {
        const double norm = logsumexp(p.logits());
        for (std::size_t k = 0; k < p.components; ++k) {
            scales_[k] = std::exp(p.log_scales()[k]);
            offsets_[k] = p.logits()[k] - norm - p.log_scales()[k] -
                          0.5 * std::log(2.0 * std::numbers::pi);
        }
    }

    double log_prob(double x) const {
        std::vector<double> terms(means_.size());
        for (std::size_t k = 0; k < means_.size(); ++k) {
            const double z = (x - means_[k]) / scales_[k];
            terms[k] = offsets_[k] - 0.5 * z * z;
        }
        return logsumexp(terms);
    }

private:
    std::vector<double> means_;
    std::vector<double> scales_;
    std::vector<double> offsets_;
};

inline double gmm_logpdf(double x, const GaussianMixtureParams& p) {
    return GaussianMixture(p).log_prob(x);
}

/// Traced per-sample log density for a column of samples (B x 1).
template <class T>
ad::Var<T> gmm_log_prob(ad::Var<T> params, ad::Var<T> x, std::size_t k) {
    auto logits = ad::reshape(ad::slice(params, 0, k), 1, k);
    auto means = ad::reshape(ad::slice(params, k, k), 1, k);
    auto log_scales = ad::reshape(ad::slice(params, 2 * k, k), 1, k);
    auto log_weights = logits - ad::logsumexp(logits);
    auto z = (x - means) / ad::exp(log_scales);
    auto terms =
        log_weights - log_scales - 0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * (z * z);
    return ad::row_logsumexp(terms);
}

}  // namespace fbm

#pragma once

// Deep factorized density: the CDF is a monotone MLP with widths
// [1, M, M, M, 1]. Weights pass through softplus so they stay positive,
// hidden layers use the gated nonlinearity h(y) = y + tanh(g) * tanh(y),
// whose slope 1 + tanh(g) sech^2(y) is positive, and the output goes
// through a sigmoid. The density is the x-derivative, carried through the
// layers alongside the forward pass.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"
#include "fbm/fourier_model.hpp"
#include "fbm/rng.hpp"

namespace fbm {

struct DeepFactorizedParams {
    static constexpr std::size_t kLayers = 4;

    std::size_t width = 3;
    std::vector<double> values;

    static std::size_t param_count(std::size_t m) { return 2 * m * m + 8 * m + 1; }
    std::size_t param_count() const { return param_count(width); }

    struct LayerShape {
        std::size_t in;
        std::size_t out;
        std::size_t weights;  // offset of the in x out raw weight block
        std::size_t bias;
        std::size_t gate;  // offset of gates; only for hidden layers
        bool hidden;
    };

    static LayerShape layer(std::size_t m, std::size_t l) {
        std::size_t offset = 0;
        LayerShape shape{};
        for (std::size_t i = 0; i <= l; ++i) {
            const std::size_t in = i == 0 ? 1 : m;
            const std::size_t out = i + 1 == kLayers ? 1 : m;
            const bool hidden = i + 1 < kLayers;
            shape = {in, out, offset, offset + in * out, offset + in * out + out, hidden};
            offset += in * out + out + (hidden ? out : 0);
        }
        return shape;
    }

    /// Spreads the initial CDF over roughly [-init_scale, init_scale].
    static DeepFactorizedParams initial(std::size_t m, Rng& rng, double init_scale = 10.0) {
        if (m == 0) throw std::invalid_argument("deep factorized width must be positive");
        DeepFactorizedParams p;
        p.width = m;
        p.values.assign(param_count(m), 0.0);
        const double scale = std::pow(init_scale, 1.0 / double(kLayers));
        for (std::size_t l = 0; l < kLayers; ++l) {
            const auto s = layer(m, l);
            const double w = std::log(std::expm1(1.0 / scale / double(s.out)));
            for (std::size_t k = 0; k < s.in * s.out; ++k) p.values[s.weights + k] = w;
            for (std::size_t k = 0; k < s.out; ++k) p.values[s.bias + k] = rng.uniform(-0.5, 0.5);
        }
        return p;
    }
};

inline void to_json(nlohmann::json& j, const DeepFactorizedParams& p) {
    j = nlohmann::json{{"model_type", "dfp"}, {"m", p.width}, {"values", p.values}};
}

inline void from_json(const nlohmann::json& j, DeepFactorizedParams& p) {
    if (j.at("model_type") != "dfp") throw std::invalid_argument("expected model_type \"dfp\"");
    p.width = j.at("m").get<std::size_t>();
    p.values = j.at("values").get<std::vector<double>>();
    if (p.values.size() != p.param_count())
        throw std::invalid_argument("dfp json: wrong number of values");
}

/// Plain evaluator for the deep factorized CDF and density.
class DeepFactorized {
public:
    explicit DeepFactorized(const DeepFactorizedParams& p) : m_(p.width) {
        for (std::size_t l = 0; l < DeepFactorizedParams::kLayers; ++l) {
            const auto s = DeepFactorizedParams::layer(m_, l);
            Layer layer;
            layer.in = s.in;
            layer.out = s.out;
            layer.weights.resize(s.in * s.out);
            for (std::size_t k = 0; k < layer.weights.size(); ++k)
                layer.weights[k] = ad::softplus(p.values[s.weights + k]);
            layer.bias.assign(p.values.begin() + std::ptrdiff_t(s.bias),
                              p.values.begin() + std::ptrdiff_t(s.bias + s.out));
            if (s.hidden) {
                layer.gate.resize(s.out);
                for (std::size_t k = 0; k < s.out; ++k)
                    layer.gate[k] = std::tanh(p.values[s.gate + k]);
            }
            layers_.push_back(std::move(layer));
        }
    }

    /// Output logit and its derivative with respect to x.
    std::pair<double, double> logit(double x) const {
        std::vector<double> y{x};
        std::vector<double> d{1.0};
        for (const Layer& layer : layers_) {
            std::vector<double> ny(layer.out);
            std::vector<double> nd(layer.out);
            for (std::size_t o = 0; o < layer.out; ++o) {
                double v = layer.bias[o];
                double dv = 0.0;
                for (std::size_t i = 0; i < layer.in; ++i) {
                    v += y[i] * layer.weights[i * layer.out + o];
                    dv += d[i] * layer.weights[i * layer.out + o];
                }
                if (!layer.gate.empty()) {
                    const double g = layer.gate[o];
                    dv *= 1.0 + g * ad::sech2(v);
                    v += g * std::tanh(v);
                }
                ny[o] = v;
                nd[o] = dv;
            }
            y = std::move(ny);
            d = std::move(nd);
        }
        return {y[0], d[0]};
    }

    double cdf(double x) const { return ad::sigmoid(logit(x).first); }

    double pdf(double x) const {
        const auto [l, dl] = logit(x);
        return ad::sigmoid(l) * ad::sigmoid(-l) * dl;
    }

    double log_prob(double x) const { return std::log(std::max(pdf(x), kDensityFloor)); }

    /// Mass of [lo, hi]; subtracts in the complementary tail when both ends
    /// sit above the median.
    double bin_probability(double lo, double hi) const {
        const double l = logit(lo).first;
        const double h = logit(hi).first;
        if (l + h > 0.0) return ad::sigmoid(-l) - ad::sigmoid(-h);
        return ad::sigmoid(h) - ad::sigmoid(l);
    }

private:
    struct Layer {
        std::size_t in = 0;
        std::size_t out = 0;
        std::vector<double> weights;
        std::vector<double> bias;
        std::vector<double> gate;
    };
    std::size_t m_;
    std::vector<Layer> layers_;
};

inline double dfp_cdf(double x, const DeepFactorizedParams& p) { return DeepFactorized(p).cdf(x); }
inline double dfp_pdf(double x, const DeepFactorizedParams& p) { return DeepFactorized(p).pdf(x); }

template <class T>
struct TracedLogit {
    ad::Var<T> logit;
    ad::Var<T> slope;  // d logit / dx; only when requested
};

/// Traced forward pass for a column of inputs (B x 1).
template <class T>
TracedLogit<T> dfp_logit(ad::Var<T> params, ad::Var<T> x, std::size_t m, bool with_slope) {
    ad::Tape<T>& tape = *params.tape();
    TracedLogit<T> out;
    ad::Var<T> y = x;
    ad::Var<T> d;
    if (with_slope) d = tape.fill(T(1), x.size(), 1);
    for (std::size_t l = 0; l < DeepFactorizedParams::kLayers; ++l) {
        const auto s = DeepFactorizedParams::layer(m, l);
        auto w = ad::softplus(ad::reshape(ad::slice(params, s.weights, s.in * s.out), s.in, s.out));
        auto b = ad::reshape(ad::slice(params, s.bias, s.out), 1, s.out);
        auto pre = ad::matmul(y, w) + b;
        if (with_slope) d = ad::matmul(d, w);
        if (s.hidden) {
            auto g = ad::tanh(ad::reshape(ad::slice(params, s.gate, s.out), 1, s.out));
            if (with_slope) d = d * (1.0 + g * ad::sech2(pre));
            y = pre + g * ad::tanh(pre);
        } else {
            y = pre;
        }
    }
    out.logit = y;
    out.slope = d;
    return out;
}

template <class T>
ad::Var<T> dfp_log_prob(ad::Var<T> params, ad::Var<T> x, std::size_t m) {
    auto f = dfp_logit(params, x, m, true);
    auto density = ad::sigmoid(f.logit) * ad::sigmoid(-f.logit) * f.slope;
    return ad::log(ad::floor(density, kDensityFloor));
}

template <class T>
ad::Var<T> dfp_cdf(ad::Var<T> params, ad::Var<T> x, std::size_t m) {
    return ad::sigmoid(dfp_logit(params, x, m, false).logit);
}

}  // namespace fbm

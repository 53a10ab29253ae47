#pragma once

// Toy nonlinear transform coding on a 2D banana-shaped source.
//
// An MLP encoder maps x in R^2 to a 5D latent, an MLP decoder maps it back,
// and each latent dimension has its own univariate entropy model (Fourier
// basis or deep factorized). Training minimizes rate + lambda * distortion
// with additive uniform noise standing in for rounding; evaluation rounds
// the latents and measures the discrete entropy under the model.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"
#include "fbm/deep_factorized.hpp"
#include "fbm/fourier_model.hpp"
#include "fbm/rng.hpp"
#include "fbm/training.hpp"

namespace fbm {

using Point2 = std::array<double, 2>;

/// u ~ N(0, I); x1 = 2 u1; x2 = u2 / 2 + x1^2 / 4 - 1.
inline std::vector<Point2> sample_banana(std::size_t n, Rng& rng) {
    std::vector<Point2> out(n);
    for (auto& p : out) {
        const double u1 = rng.normal();
        const double u2 = rng.normal();
        p[0] = 2.0 * u1;
        p[1] = 0.5 * u2 + 0.25 * p[0] * p[0] - 1.0;
    }
    return out;
}

inline std::vector<Point2> sample_banana(std::size_t n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("sample_banana: n must be at least 1");
    Rng rng = Rng::stream(seed, "banana");
    return sample_banana(n, rng);
}

/// Per-dimension variance of the source, averaged over both dimensions:
/// Var(x1) = 4, Var(x2) = 1/4 + Var(u1^2) = 9/4.
inline constexpr double kBananaMeanVariance = (4.0 + 2.25) / 2.0;

enum class EntropyKind { fbm, dfp };

inline const char* to_string(EntropyKind k) { return k == EntropyKind::fbm ? "fbm" : "dfp"; }

inline EntropyKind parse_entropy_kind(const std::string& s) {
    if (s == "fbm") return EntropyKind::fbm;
    if (s == "dfp") return EntropyKind::dfp;
    throw std::invalid_argument("unknown entropy model kind: " + s);
}

struct NtcShape {
    EntropyKind entropy = EntropyKind::fbm;
    std::size_t fbm_n = 20;
    std::size_t dfp_m = 3;
    std::size_t latent_dim = 5;
    std::size_t hidden = 50;
    std::size_t source_dim = 2;
    double leaky_slope = 0.01;

    std::vector<std::size_t> encoder_widths() const {
        return {source_dim, hidden, hidden, hidden, latent_dim};
    }
    std::vector<std::size_t> decoder_widths() const {
        return {latent_dim, hidden, hidden, hidden, source_dim};
    }

    static std::size_t mlp_param_count(const std::vector<std::size_t>& w) {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
        return n;
    }

    std::size_t encoder_params() const { return mlp_param_count(encoder_widths()); }
    std::size_t decoder_params() const { return mlp_param_count(decoder_widths()); }
    std::size_t entropy_params_per_dim() const {
        return entropy == EntropyKind::fbm ? 2 * (fbm_n + 1) + 2
                                           : DeepFactorizedParams::param_count(dfp_m);
    }
    std::size_t entropy_params() const { return latent_dim * entropy_params_per_dim(); }

    std::size_t decoder_offset() const { return encoder_params(); }
    std::size_t entropy_offset(std::size_t d) const {
        return encoder_params() + decoder_params() + d * entropy_params_per_dim();
    }
    std::size_t total_params() const {
        return encoder_params() + decoder_params() + entropy_params();
    }
};

struct NTCModel {
    NtcShape shape;
    double lambda = 1.0;
    std::vector<double> params;

    /// Glorot-uniform transforms with zero biases; entropy models start at
    /// their usual initializations.
    static NTCModel create(const NtcShape& shape, double lambda, Rng& rng) {
        NTCModel m;
        m.shape = shape;
        m.lambda = lambda;
        m.params.reserve(shape.total_params());
        for (const auto& widths : {shape.encoder_widths(), shape.decoder_widths()}) {
            for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
                const double limit = std::sqrt(6.0 / double(widths[l] + widths[l + 1]));
                for (std::size_t k = 0; k < widths[l] * widths[l + 1]; ++k)
                    m.params.push_back(rng.uniform(-limit, limit));
                m.params.insert(m.params.end(), widths[l + 1], 0.0);
            }
        }
        for (std::size_t d = 0; d < shape.latent_dim; ++d) {
            const auto ent = shape.entropy == EntropyKind::fbm
                                 ? FourierDensityParams::initial(shape.fbm_n, rng).flat()
                                 : DeepFactorizedParams::initial(shape.dfp_m, rng).values;
            m.params.insert(m.params.end(), ent.begin(), ent.end());
        }
        return m;
    }

    std::span<const double> entropy_params(std::size_t d) const {
        return {params.data() + shape.entropy_offset(d), shape.entropy_params_per_dim()};
    }
};

inline void to_json(nlohmann::json& j, const NTCModel& m) {
    j = nlohmann::json{{"model_type", "ntc"},
                       {"entropy_kind", to_string(m.shape.entropy)},
                       {"fbm_n", m.shape.fbm_n},
                       {"dfp_m", m.shape.dfp_m},
                       {"latent_dim", m.shape.latent_dim},
                       {"hidden", m.shape.hidden},
                       {"leaky_slope", m.shape.leaky_slope},
                       {"lambda", m.lambda},
                       {"params", m.params}};
}

inline void from_json(const nlohmann::json& j, NTCModel& m) {
    if (j.at("model_type") != "ntc") throw std::invalid_argument("expected model_type \"ntc\"");
    m.shape.entropy = parse_entropy_kind(j.at("entropy_kind").get<std::string>());
    m.shape.fbm_n = j.at("fbm_n").get<std::size_t>();
    m.shape.dfp_m = j.at("dfp_m").get<std::size_t>();
    m.shape.latent_dim = j.at("latent_dim").get<std::size_t>();
    m.shape.hidden = j.at("hidden").get<std::size_t>();
    m.shape.leaky_slope = j.at("leaky_slope").get<double>();
    m.lambda = j.at("lambda").get<double>();
    m.params = j.at("params").get<std::vector<double>>();
    if (m.params.size() != m.shape.total_params())
        throw std::invalid_argument("ntc json: wrong number of parameters");
}

// Traced pieces. `p` is the full flat parameter vector of an NTCModel.

template <class T>
ad::Var<T> traced_mlp(ad::Var<T> p, std::size_t offset, const std::vector<std::size_t>& widths,
                      ad::Var<T> x, double slope) {
    ad::Var<T> h = x;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::size_t in = widths[l];
        const std::size_t out = widths[l + 1];
        auto w = ad::reshape(ad::slice(p, offset, in * out), in, out);
        auto b = ad::reshape(ad::slice(p, offset + in * out, out), 1, out);
        offset += in * out + out;
        h = ad::matmul(h, w) + b;
        if (l + 2 < widths.size()) h = ad::leaky_relu(h, slope);
    }
    return h;
}

template <class T>
ad::Var<T> encode(const NtcShape& s, ad::Var<T> p, ad::Var<T> x) {
    return traced_mlp(p, 0, s.encoder_widths(), x, s.leaky_slope);
}

template <class T>
ad::Var<T> decode(const NtcShape& s, ad::Var<T> p, ad::Var<T> y) {
    return traced_mlp(p, s.decoder_offset(), s.decoder_widths(), y, s.leaky_slope);
}

/// Probability of the unit bin centred on each entry of the column `y`
/// under the entropy model of latent dimension `d`.
template <class T>
ad::Var<T> traced_bin_probability(const NtcShape& s, ad::Var<T> p, std::size_t d, ad::Var<T> y) {
    ad::Tape<T>& tape = *p.tape();
    auto ent = ad::slice(p, s.entropy_offset(d), s.entropy_params_per_dim());
    auto hi = y + 0.5;
    auto lo = y - 0.5;
    if (s.entropy == EntropyKind::fbm)
        return fbm_cdf_real(ent, hi, s.fbm_n) - fbm_cdf_real(ent, lo, s.fbm_n);
    auto lh = dfp_logit(ent, hi, s.dfp_m, false).logit;
    auto ll = dfp_logit(ent, lo, s.dfp_m, false).logit;
    // Subtract in whichever tail keeps the two sigmoids away from 1.
    std::vector<double> sign(y.size());
    for (std::size_t i = 0; i < sign.size(); ++i)
        sign[i] = static_cast<double>(lh.values()[i] + ll.values()[i]) > 0.0 ? -1.0 : 1.0;
    auto sg = tape.constant(std::span<const double>(sign), sign.size(), 1);
    return sg * (ad::sigmoid(sg * lh) - ad::sigmoid(sg * ll));
}

inline constexpr double kBinProbabilityFloor = 1e-12;

/// Bits per row of the noisy latent matrix `y_tilde` (B x latent_dim).
template <class T>
ad::Var<T> rate_bits(const NtcShape& s, ad::Var<T> p, ad::Var<T> y_tilde) {
    ad::Var<T> total;
    for (std::size_t d = 0; d < s.latent_dim; ++d) {
        auto prob = traced_bin_probability(s, p, d, ad::slice_cols(y_tilde, d, 1));
        auto bits = ad::log(ad::floor(prob, kBinProbabilityFloor)) * (-1.0 / std::numbers::ln2);
        total = d == 0 ? bits : total + bits;
    }
    return total;
}

template <class T>
struct RdTerms {
    ad::Var<T> loss;
    ad::Var<T> rate;
    ad::Var<T> distortion;
};

/// Rate-distortion Lagrangian on a batch `x` (B x 2) with noise `u` (B x 5).
template <class T>
RdTerms<T> rd_loss(const NTCModel& m, ad::Var<T> p, ad::Var<T> x, ad::Var<T> u) {
    if (x.rows() == 0) throw std::invalid_argument("rd_loss: empty batch");
    auto y_tilde = encode(m.shape, p, x) + u;
    auto rate = ad::mean(rate_bits(m.shape, p, y_tilde));
    auto err = x - decode(m.shape, p, y_tilde);
    auto distortion = ad::sum(err * err) * (1.0 / double(x.size()));
    return {rate + m.lambda * distortion, rate, distortion};
}

/// Plain evaluation of a trained model.
class NtcCodec {
public:
    explicit NtcCodec(const NTCModel& m) : model_(m) {
        for (std::size_t d = 0; d < m.shape.latent_dim; ++d) {
            const auto ep = m.entropy_params(d);
            if (m.shape.entropy == EntropyKind::fbm)
                fourier_.emplace_back(FourierDensityParams::from_flat(m.shape.fbm_n, ep));
            else
                factorized_.emplace_back(
                    DeepFactorizedParams{m.shape.dfp_m, std::vector<double>(ep.begin(), ep.end())});
        }
    }

    std::vector<double> encode(const Point2& x) const {
        return mlp(0, model_.shape.encoder_widths(), {x[0], x[1]});
    }

    Point2 decode(std::span<const double> y) const {
        const auto out = mlp(model_.shape.decoder_offset(), model_.shape.decoder_widths(),
                             std::vector<double>(y.begin(), y.end()));
        return {out[0], out[1]};
    }

    double bin_probability(std::size_t d, double center) const {
        return model_.shape.entropy == EntropyKind::fbm
                   ? fourier_[d].bin_probability(center - 0.5, center + 0.5)
                   : factorized_[d].bin_probability(center - 0.5, center + 0.5);
    }

private:
    std::vector<double> mlp(std::size_t offset, const std::vector<std::size_t>& widths,
                            std::vector<double> h) const {
        const auto& p = model_.params;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::size_t in = widths[l];
            const std::size_t out = widths[l + 1];
            std::vector<double> next(p.begin() + std::ptrdiff_t(offset + in * out),
                                     p.begin() + std::ptrdiff_t(offset + in * out + out));
            for (std::size_t i = 0; i < in; ++i)
                for (std::size_t o = 0; o < out; ++o) next[o] += h[i] * p[offset + i * out + o];
            offset += in * out + out;
            if (l + 2 < widths.size())
                for (auto& v : next) v = v > 0.0 ? v : model_.shape.leaky_slope * v;
            h = std::move(next);
        }
        return h;
    }

    const NTCModel& model_;
    std::vector<FourierDensity> fourier_;
    std::vector<DeepFactorized> factorized_;
};

/// Per-sample bits under the noisy proxy: sum_d -log2 P_d([y+u-1/2, y+u+1/2]).
inline double rate_proxy(const NTCModel& m, std::span<const double> y, std::span<const double> u) {
    if (y.size() != m.shape.latent_dim || u.size() != y.size())
        throw std::invalid_argument("rate_proxy: dimension mismatch");
    const NtcCodec codec(m);
    double bits = 0.0;
    for (std::size_t d = 0; d < y.size(); ++d)
        bits -= std::log2(std::max(codec.bin_probability(d, y[d] + u[d]), kBinProbabilityFloor));
    return bits;
}

struct RDPoint {
    double rate = 0.0;        // bits per sample, rounded latents
    double distortion = 0.0;  // mean squared error per source dimension
    double proxy_rate = 0.0;  // bits per sample under uniform noise
};

class ZeroProbabilityBin : public std::runtime_error {
public:
    ZeroProbabilityBin(std::size_t dim, double bin)
        : std::runtime_error("zero-probability bin " + std::to_string(bin) + " in latent dimension " +
                             std::to_string(dim)),
          dim_(dim),
          bin_(bin) {}
    std::size_t dim() const noexcept { return dim_; }
    double bin() const noexcept { return bin_; }

private:
    std::size_t dim_;
    double bin_;
};

/// Rounds the latents of n fresh source draws and measures rate and distortion.
inline RDPoint eval_quantized(const NTCModel& m, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("eval_quantized: n must be at least 1");
    Rng rng = Rng::stream(seed, "compress/eval");
    Rng noise = Rng::stream(seed, "compress/eval-noise");
    const auto xs = sample_banana(n, rng);
    const NtcCodec codec(m);
    RDPoint pt;
    for (const auto& x : xs) {
        auto y = codec.encode(x);
        for (std::size_t d = 0; d < y.size(); ++d) {
            const double noisy = y[d] + noise.uniform(-0.5, 0.5);
            pt.proxy_rate -=
                std::log2(std::max(codec.bin_probability(d, noisy), kBinProbabilityFloor));
            y[d] = std::round(y[d]);
            const double prob = codec.bin_probability(d, y[d]);
            if (!(prob > 0.0)) throw ZeroProbabilityBin(d, y[d]);
            pt.rate -= std::log2(prob);
        }
        const auto xh = codec.decode(y);
        pt.distortion += 0.5 * ((x[0] - xh[0]) * (x[0] - xh[0]) + (x[1] - xh[1]) * (x[1] - xh[1]));
    }
    pt.rate /= double(n);
    pt.proxy_rate /= double(n);
    pt.distortion /= double(n);
    return pt;
}

struct RdTrainConfig {
    double learning_rate = 1e-3;
    std::size_t epochs = 20;
    std::size_t steps_per_epoch = 512;
    std::size_t batch_size = 512;
    std::uint64_t seed = 0;

    /// 200 epochs of 2048 steps.
    static RdTrainConfig paper() {
        RdTrainConfig c;
        c.epochs = 200;
        c.steps_per_epoch = 2048;
        return c;
    }
    static RdTrainConfig desk() { return {}; }

    void validate() const {
        if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1)
            throw std::invalid_argument("rd train config: counts must be at least 1");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("rd train config: learning rate must be > 0");
    }
};

inline void apply_overrides(RdTrainConfig& out, const nlohmann::json& j) {
    RdTrainConfig next = out;
    if (!j.is_object()) throw std::invalid_argument("train config must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "learning_rate") next.learning_rate = value.get<double>();
        else if (key == "epochs") next.epochs = value.get<std::size_t>();
        else if (key == "steps_per_epoch") next.steps_per_epoch = value.get<std::size_t>();
        else if (key == "batch_size") next.batch_size = value.get<std::size_t>();
        else if (key == "seed") next.seed = value.get<std::uint64_t>();
        else throw std::invalid_argument("unknown compression train key: " + key);
    }
    next.validate();
    out = next;
}

struct RdEpoch {
    std::size_t epoch = 0;
    double loss = 0.0;
    double rate = 0.0;
    double distortion = 0.0;
};

struct RdTrainResult {
    NTCModel model;
    std::vector<RdEpoch> epochs;
    double wall_seconds = 0.0;
};

class CompressionDiverged : public std::runtime_error {
public:
    CompressionDiverged(const std::string& what, NTCModel snapshot)
        : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
    const NTCModel& snapshot() const noexcept { return snapshot_; }

private:
    NTCModel snapshot_;
};

/// Joint training of transforms and entropy models with Adam on a cosine
/// schedule, using fresh source draws and fresh noise every step.
inline RdTrainResult train_rd(const NtcShape& shape, double lambda, const RdTrainConfig& cfg) {
    if (!(lambda > 0.0)) throw std::invalid_argument("train_rd: lambda must be positive");
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    Rng init = Rng::stream(cfg.seed, "compress/init");
    Rng data = Rng::stream(cfg.seed, "compress/data");
    Rng noise = Rng::stream(cfg.seed, "compress/noise");
    RdTrainResult result;
    result.model = NTCModel::create(shape, lambda, init);
    NTCModel& m = result.model;
    AdamState state(m.params.size());
    const std::size_t total = cfg.epochs * cfg.steps_per_epoch;
    const std::size_t b = cfg.batch_size;
    std::vector<double> xs(b * shape.source_dim);
    std::vector<double> us(b * shape.latent_dim);
    ad::Tape<double> tape;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        RdEpoch stats{epoch + 1, 0.0, 0.0, 0.0};
        for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
            const auto pts = sample_banana(b, data);
            for (std::size_t i = 0; i < b; ++i) {
                xs[2 * i] = pts[i][0];
                xs[2 * i + 1] = pts[i][1];
            }
            for (auto& u : us) u = noise.uniform(-0.5, 0.5);
            tape.clear();
            auto p = tape.variable(m.params);
            auto x = tape.constant(std::span<const double>(xs), b, shape.source_dim);
            auto u = tape.constant(std::span<const double>(us), b, shape.latent_dim);
            RdTerms<double> terms;
            try {
                terms = rd_loss(m, p, x, u);
                const auto g = tape.grad(terms.loss, p);
                adam_step(m.params, g.gradient, state, cosine_lr(step, total, cfg.learning_rate));
            } catch (const ad::NonFiniteError& e) {
                throw CompressionDiverged(std::string("compression training diverged: ") + e.what(),
                                          m);
            } catch (const NonFiniteGradient& e) {
                throw CompressionDiverged(std::string("compression training diverged: ") + e.what(),
                                          m);
            }
            stats.loss += terms.loss.value();
            stats.rate += terms.rate.value();
            stats.distortion += terms.distortion.value();
        }
        const double k = double(cfg.steps_per_epoch);
        stats.loss /= k;
        stats.rate /= k;
        stats.distortion /= k;
        result.epochs.push_back(stats);
    }
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace fbm

#pragma once

// Adam with a cosine-decayed learning rate, and the maximum-likelihood
// fitting loop shared by all density models.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/autodiff.hpp"
#include "fbm/density_model.hpp"
#include "fbm/rng.hpp"
#include "fbm/targets.hpp"

namespace fbm {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t epochs = 500;
    std::size_t steps_per_epoch = 500;
    std::size_t batch_size = 128;
    std::size_t validation_batch = 2048;
    double gamma = 1e-6;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t kld_samples = 100000;
    std::size_t kld_panels = kDefaultPanels;

    /// Full-length schedule: 500 epochs of 500 steps at 1e-4.
    static TrainConfig paper() { return {}; }

    /// CI-sized schedule: 50 epochs of 200 steps. The shorter run starts
    /// from a larger learning rate so the total parameter travel stays
    /// comparable.
    static TrainConfig desk() {
        TrainConfig c;
        c.epochs = 50;
        c.steps_per_epoch = 200;
        c.learning_rate = 1e-2;
        return c;
    }

    std::size_t total_steps() const { return epochs * steps_per_epoch; }

    void validate() const {
        if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1 || validation_batch < 1)
            throw std::invalid_argument("train config: counts must be at least 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
        if (!(gamma >= 0.0)) throw std::invalid_argument("train config: gamma must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0))
            throw std::invalid_argument("train config: invalid Adam hyperparameters");
        if (kld_samples < 2 || kld_panels < 1)
            throw std::invalid_argument("train config: invalid KLD settings");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"epochs", c.epochs},
                       {"steps_per_epoch", c.steps_per_epoch},
                       {"batch_size", c.batch_size},
                       {"validation_batch", c.validation_batch},
                       {"gamma", c.gamma},
                       {"seed", c.seed},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"kld_samples", c.kld_samples},
                       {"kld_panels", c.kld_panels}};
}

/// Reads overrides on top of `out`. Unknown keys are rejected, and a failed
/// update leaves `out` untouched.
inline void apply_overrides(TrainConfig& out, const nlohmann::json& j) {
    TrainConfig next = out;
    if (!j.is_object()) throw std::invalid_argument("train config must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "learning_rate") next.learning_rate = value.get<double>();
        else if (key == "epochs") next.epochs = value.get<std::size_t>();
        else if (key == "steps_per_epoch") next.steps_per_epoch = value.get<std::size_t>();
        else if (key == "batch_size") next.batch_size = value.get<std::size_t>();
        else if (key == "validation_batch") next.validation_batch = value.get<std::size_t>();
        else if (key == "gamma") next.gamma = value.get<double>();
        else if (key == "seed") next.seed = value.get<std::uint64_t>();
        else if (key == "beta1") next.beta1 = value.get<double>();
        else if (key == "beta2") next.beta2 = value.get<double>();
        else if (key == "epsilon") next.epsilon = value.get<double>();
        else if (key == "kld_samples") next.kld_samples = value.get<std::size_t>();
        else if (key == "kld_panels") next.kld_panels = value.get<std::size_t>();
        else throw std::invalid_argument("unknown train config key: " + key);
    }
    next.validate();
    out = next;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) { apply_overrides(c, j); }

/// lr0 * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
    if (total == 0 || step > total) throw std::invalid_argument("cosine_lr: step out of range");
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
public:
    explicit NonFiniteGradient(std::size_t index)
        : std::runtime_error("non-finite gradient at parameter " + std::to_string(index)),
          index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      double lr, const AdamHyper& hp = {}) {
    if (params.size() != grads.size() || state.m.size() != params.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i])) throw NonFiniteGradient(i);
    ++state.step;
    const double c1 = 1.0 - std::pow(hp.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(hp.beta2, double(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + hp.epsilon);
    }
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double nll = 0.0;
    double lr = 0.0;
};

struct TrainReport {
    std::vector<EpochMetrics> epochs;
    std::optional<KldEstimate> kld_mc;
    std::optional<double> kld_quadrature;
    double wall_seconds = 0.0;
    DensityModel model;
    Domain domain = Domain::real;
};

/// Raised when the loss or validation NLL stops being finite.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, DensityModel snapshot)
        : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
    const DensityModel& snapshot() const noexcept { return snapshot_; }

private:
    DensityModel snapshot_;
};

/// Draws a minibatch into the span.
using BatchSource = std::function<void(Rng&, std::span<double>)>;

/// Minibatch maximum-likelihood training of `model` from `source`.
inline TrainReport fit(DensityModel model, const BatchSource& source,
                       std::span<const double> validation, Domain domain,
                       const TrainConfig& cfg) {
    cfg.validate();
    if (validation.empty()) throw std::invalid_argument("fit: empty validation set");
    const auto start = std::chrono::steady_clock::now();
    Rng batch_rng = Rng::stream(cfg.seed, "train/batches");
    const AdamHyper hp{cfg.beta1, cfg.beta2, cfg.epsilon};
    AdamState state(model.params.size());
    std::vector<double> batch(cfg.batch_size);
    const std::size_t total = cfg.total_steps();
    std::size_t step = 0;
    TrainReport report;
    report.domain = domain;
    ad::Tape<double> tape;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
            source(batch_rng, batch);
            tape.clear();
            auto p = tape.variable(model.params);
            auto x = tape.constant(std::span<const double>(batch), batch.size(), 1);
            ad::GradResult<double> g;
            try {
                g = tape.grad(model.loss(p, x, domain, cfg.gamma), p);
                adam_step(model.params, g.gradient, state, cosine_lr(step, total, cfg.learning_rate),
                          hp);
            } catch (const ad::NonFiniteError& e) {
                throw TrainingDiverged(std::string("training diverged: ") + e.what(), model);
            } catch (const NonFiniteGradient& e) {
                throw TrainingDiverged(std::string("training diverged: ") + e.what(), model);
            }
        }
        const auto logq = model.log_density(domain);
        double nll = 0.0;
        for (double v : validation) nll -= logq(v);
        nll /= double(validation.size());
        if (!std::isfinite(nll))
            throw TrainingDiverged("validation NLL is not finite at epoch " +
                                       std::to_string(epoch + 1),
                                   model);
        report.epochs.push_back({epoch + 1, nll, cosine_lr(step, total, cfg.learning_rate)});
    }
    report.model = std::move(model);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

/// Default initialization hints for a target: data range from the
/// validation draw.
inline ModelInit init_for(std::span<const double> validation) {
    ModelInit init;
    if (!validation.empty()) {
        init.data_lo = *std::min_element(validation.begin(), validation.end());
        init.data_hi = *std::max_element(validation.begin(), validation.end());
    }
    return init;
}

/// Fits a fresh model of (kind, size) on a generative target, drawing new
/// samples every step, then scores it against the target.
inline TrainReport fit(ModelKind kind, std::size_t size, const TargetSpec& target,
                       const TrainConfig& cfg, std::optional<ModelInit> init = std::nullopt) {
    target.validate();
    Rng val_rng = Rng::stream(cfg.seed, "train/validation");
    const auto validation = sample(target, cfg.validation_batch, val_rng);
    Rng init_rng = Rng::stream(cfg.seed, "train/init");
    auto model = DensityModel::create(kind, size, init_rng, init.value_or(init_for(validation)));
    BatchSource source = [&target](Rng& rng, std::span<double> out) {
        const auto draw = sample(target, out.size(), rng);
        std::copy(draw.begin(), draw.end(), out.begin());
    };
    auto report = fit(std::move(model), source, validation, target.support, cfg);
    const auto logq = report.model.log_density(target.support);
    report.kld_mc = kld_monte_carlo(target, logq, cfg.kld_samples, cfg.seed);
    report.kld_quadrature = kld_quadrature(target, logq, cfg.kld_panels);
    return report;
}

/// Fits on a fixed dataset by sampling minibatches with replacement.
inline TrainReport fit(ModelKind kind, std::size_t size, std::span<const double> data,
                       Domain domain, const TrainConfig& cfg,
                       std::optional<ModelInit> init = std::nullopt) {
    if (data.empty()) throw std::invalid_argument("fit: empty dataset");
    std::vector<double> owned(data.begin(), data.end());
    Rng init_rng = Rng::stream(cfg.seed, "train/init");
    auto model = DensityModel::create(kind, size, init_rng, init.value_or(init_for(owned)));
    BatchSource source = [&owned](Rng& rng, std::span<double> out) {
        for (auto& x : out) x = owned[std::size_t(rng.next() % owned.size())];
    };
    return fit(std::move(model), source, owned, domain, cfg);
}

inline void to_json(nlohmann::json& j, const TrainReport& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs)
        epochs.push_back({{"epoch", e.epoch}, {"nll", e.nll}, {"lr", e.lr}});
    j = nlohmann::json{{"epochs", epochs},
                       {"domain", to_string(r.domain)},
                       {"model_kind", to_string(r.model.kind)},
                       {"param_count", r.model.param_count()},
                       {"model", r.model}};
    if (r.kld_mc) {
        j["kld_mc"] = r.kld_mc->kld;
        j["kld_mc_stderr"] = r.kld_mc->stderr_;
    }
    if (r.kld_quadrature) j["kld_quadrature"] = *r.kld_quadrature;
}

}  // namespace fbm

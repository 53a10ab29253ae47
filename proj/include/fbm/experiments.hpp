#pragma once

// Experiment commands behind the `fbm` tool: density fits, budget sweeps and
// rate-distortion sweeps. Each command validates its whole JSON config before
// doing any work and writes plot-ready CSV/JSON files. Outputs depend only on
// the config and seed, so reruns overwrite files with identical bytes.

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbm/compression.hpp"
#include "fbm/density_model.hpp"
#include "fbm/quadrature.hpp"
#include "fbm/targets.hpp"
#include "fbm/training.hpp"

namespace fbm {

/// Invalid or inconsistent experiment configuration (exit code 2).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct CommandOptions {
    std::optional<std::uint64_t> seed;
    std::filesystem::path out_dir = ".";
    bool paper_scale = false;
};

// ---------------------------------------------------------------------------
// Output helpers

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

class CsvTable {
public:
    CsvTable(const std::string& config_hash, const std::vector<std::string>& header) {
        text_ << "# config_hash=" << config_hash << '\n';
        row(header);
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) text_ << (i ? "," : "") << cells[i];
        text_ << '\n';
    }

    std::string str() const { return text_.str(); }

private:
    std::ostringstream text_;
};

/// Hash of the effective configuration: the JSON document plus the
/// command-line seed and scale overrides.
inline std::string config_hash(const nlohmann::json& config, const CommandOptions& opts) {
    nlohmann::json effective = {{"config", config}, {"paper_scale", opts.paper_scale}};
    if (opts.seed) effective["seed"] = *opts.seed;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a(effective.dump()));
    return buf;
}

/// Runs `job(i)` for i in [0, n) on up to hardware_concurrency threads. The
/// first exception is rethrown after all workers finish.
template <class Job>
void parallel_for(std::size_t n, Job&& job) {
    const std::size_t workers =
        std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
}

template <class T>
T get(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing key \"" + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + ": key \"" + key + "\" has the wrong type");
    }
}

template <class T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback, const std::string& where) {
    return j.contains(key) ? get<T>(j, key, where) : fallback;
}

inline std::string get_name(const nlohmann::json& j, const std::string& fallback,
                            const std::string& where) {
    auto name = get_or<std::string>(j, "name", fallback, where);
    if (name.empty() || name.find_first_of("/\\") != std::string::npos)
        throw ConfigError(where + ": name must be a plain file prefix");
    return name;
}

inline TargetSpec parse_target(const nlohmann::json& j, const std::string& where) {
    try {
        if (j.is_string()) return named_target(j.get<std::string>());
        auto spec = j.get<TargetSpec>();
        spec.validate();
        return spec;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(where + ": invalid target: " + e.what());
    }
}

inline TrainConfig parse_train(const nlohmann::json& j, bool paper_scale, std::uint64_t seed,
                               const std::string& where) {
    TrainConfig cfg = paper_scale ? TrainConfig::paper() : TrainConfig::desk();
    if (j.contains("train")) {
        if (j.at("train").contains("seed"))
            throw ConfigError(where + ": set the seed at the top level, not under \"train\"");
        try {
            apply_overrides(cfg, j.at("train"));
        } catch (const std::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    cfg.seed = seed;
    return cfg;
}

inline ModelKind parse_kind(const std::string& s, const std::string& where) {
    try {
        return parse_model_kind(s);
    } catch (const std::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline std::uint64_t resolve_seed(const nlohmann::json& j, const CommandOptions& opts,
                                  const std::string& where) {
    return opts.seed.value_or(get_or<std::uint64_t>(j, "seed", 0, where));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fit

struct FitConfig {
    ModelKind kind = ModelKind::fbm;
    std::size_t size = 0;
    TargetSpec target;
    TrainConfig train;
    std::string name = "fit";
    std::size_t grid_points = 1024;
};

inline FitConfig parse_fit_config(const nlohmann::json& j, const CommandOptions& opts) {
    const std::string where = "fit config";
    detail::check_keys(j, {"model", "size", "budget", "target", "train", "seed", "name", "grid_points"},
                       where);
    FitConfig c;
    c.kind = detail::parse_kind(detail::get<std::string>(j, "model", where), where);
    if (j.contains("size") == j.contains("budget"))
        throw ConfigError(where + ": give exactly one of \"size\" and \"budget\"");
    c.size = j.contains("size")
                 ? detail::get<std::size_t>(j, "size", where)
                 : size_for_budget(c.kind, detail::get<std::size_t>(j, "budget", where));
    if (c.kind != ModelKind::fbm && c.size == 0)
        throw ConfigError(where + ": size must be at least 1 for " + to_string(c.kind));
    if (!j.contains("target")) throw ConfigError(where + ": missing key \"target\"");
    c.target = detail::parse_target(j.at("target"), where);
    c.train = detail::parse_train(j, opts.paper_scale, detail::resolve_seed(j, opts, where), where);
    c.name = detail::get_name(j, "fit", where);
    c.grid_points = detail::get_or<std::size_t>(j, "grid_points", 1024, where);
    if (c.grid_points < 2) throw ConfigError(where + ": grid_points must be at least 2");
    return c;
}

struct FitOutputs {
    std::filesystem::path model_json;
    std::filesystem::path metrics_csv;
    std::filesystem::path density_csv;
    TrainReport report;
};

/// Plotting window for a target's density curve.
inline std::pair<double, double> plot_window(const TargetSpec& target) {
    if (target.support == Domain::periodic) return {-1.0, 1.0};
    double lo = 0.0;
    double hi = 0.0;
    bool first = true;
    for (const auto& c : target.components) {
        const double spread = c.kind == ComponentKind::laplacian ? 8.0 * c.p2 : 5.0 * c.p2;
        lo = first ? c.p1 - spread : std::min(lo, c.p1 - spread);
        hi = first ? c.p1 + spread : std::max(hi, c.p1 + spread);
        first = false;
    }
    return {lo, hi};
}

inline FitOutputs cmd_fit(const nlohmann::json& config, const CommandOptions& opts = {}) {
    const FitConfig c = parse_fit_config(config, opts);
    const std::string hash = config_hash(config, opts);
    FitOutputs out;
    out.report = fit(c.kind, c.size, c.target, c.train);
    const auto& r = out.report;

    nlohmann::json doc = r;
    doc["target"] = c.target;
    doc["config_hash"] = hash;
    doc["seed"] = c.train.seed;
    out.model_json = opts.out_dir / (c.name + "_model.json");
    write_atomic(out.model_json, doc.dump(2) + "\n");

    CsvTable metrics(hash, {"epoch", "nll", "lr"});
    for (const auto& e : r.epochs)
        metrics.row({std::to_string(e.epoch), format_number(e.nll), format_number(e.lr)});
    out.metrics_csv = opts.out_dir / (c.name + "_metrics.csv");
    write_atomic(out.metrics_csv, metrics.str());

    // Cell-centred grid so the open periodic interval is never hit at its ends.
    const auto [lo, hi] = plot_window(c.target);
    const auto pdf = r.model.density(c.target.support);
    CsvTable curve(hash, {"x", "model_pdf", "target_pdf"});
    for (std::size_t i = 0; i < c.grid_points; ++i) {
        const double x = lo + (hi - lo) * (double(i) + 0.5) / double(c.grid_points);
        curve.row({format_number(x), format_number(pdf(x)),
                   format_number(std::exp(true_logpdf(c.target, x)))});
    }
    out.density_csv = opts.out_dir / (c.name + "_density.csv");
    write_atomic(out.density_csv, curve.str());
    return out;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepConfig {
    std::vector<ModelKind> models;
    std::vector<std::size_t> budgets;
    MixtureFamily family = MixtureFamily::gauss_laplace;
    std::vector<std::size_t> components;  // K values for the Gaussian family
    std::vector<std::uint64_t> seeds;
    TrainConfig train;
    std::string name = "sweep";
};

inline SweepConfig parse_sweep_config(const nlohmann::json& j, const CommandOptions& opts) {
    const std::string where = "sweep config";
    detail::check_keys(j, {"models", "budgets", "target", "seeds", "train", "seed", "name"}, where);
    SweepConfig c;
    for (const auto& m : detail::get<std::vector<std::string>>(j, "models", where))
        c.models.push_back(detail::parse_kind(m, where));
    c.budgets = detail::get<std::vector<std::size_t>>(j, "budgets", where);
    if (c.models.empty() || c.budgets.empty())
        throw ConfigError(where + ": models and budgets must be non-empty");
    if (!j.contains("target")) throw ConfigError(where + ": missing key \"target\"");
    const auto& t = j.at("target");
    detail::check_keys(t, {"family", "k"}, where + " target");
    const auto family = detail::get<std::string>(t, "family", where + " target");
    if (family == "gauss_laplace") {
        c.family = MixtureFamily::gauss_laplace;
        if (t.contains("k")) throw ConfigError(where + ": gauss_laplace targets have fixed k = 40");
        c.components = {40};
    } else if (family == "gaussians") {
        c.family = MixtureFamily::gaussians;
        c.components = detail::get<std::vector<std::size_t>>(t, "k", where + " target");
        if (c.components.empty() ||
            std::any_of(c.components.begin(), c.components.end(), [](auto k) { return k == 0; }))
            throw ConfigError(where + ": k values must be positive");
    } else {
        throw ConfigError(where + ": unknown target family \"" + family + "\"");
    }
    if (j.contains("seeds") && (j.contains("seed") || opts.seed))
        throw ConfigError(where + ": give either a seed list or a single seed");
    c.seeds = j.contains("seeds") ? detail::get<std::vector<std::uint64_t>>(j, "seeds", where)
                                  : std::vector<std::uint64_t>{detail::resolve_seed(j, opts, where)};
    if (c.seeds.empty()) throw ConfigError(where + ": seeds must be non-empty");
    c.train = detail::parse_train(j, opts.paper_scale, 0, where);
    c.name = detail::get_name(j, "sweep", where);
    return c;
}

struct SweepRow {
    ModelKind model = ModelKind::fbm;
    std::size_t params = 0;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    double kld = 0.0;
    double stderr_ = 0.0;
    double kld_quadrature = 0.0;
};

struct SweepOutputs {
    std::filesystem::path csv;
    std::vector<SweepRow> rows;
};

inline SweepOutputs cmd_sweep(const nlohmann::json& config, const CommandOptions& opts = {}) {
    const SweepConfig c = parse_sweep_config(config, opts);
    const std::string hash = config_hash(config, opts);
    struct Job {
        ModelKind kind;
        std::size_t budget;
        std::size_t k;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t k : c.components)
        for (std::uint64_t seed : c.seeds)
            for (std::size_t budget : c.budgets)
                for (ModelKind kind : c.models) jobs.push_back({kind, budget, k, seed});

    SweepOutputs out;
    out.rows.resize(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        const Job& job = jobs[i];
        const auto target = c.family == MixtureFamily::gauss_laplace
                                ? random_mixture(MixtureFamily::gauss_laplace, 40, job.seed)
                                : random_mixture(MixtureFamily::gaussians, job.k, job.seed);
        TrainConfig cfg = c.train;
        cfg.seed = job.seed;
        const std::size_t size = size_for_budget(job.kind, job.budget);
        const auto report = fit(job.kind, size, target, cfg);
        out.rows[i] = {job.kind,           param_count(job.kind, size), job.k, job.seed,
                       report.kld_mc->kld, report.kld_mc->stderr_,      *report.kld_quadrature};
    });

    CsvTable table(hash, {"model", "params", "k", "seed", "kld", "stderr"});
    for (const auto& r : out.rows)
        table.row({to_string(r.model), std::to_string(r.params), std::to_string(r.k),
                   std::to_string(r.seed), format_number(r.kld), format_number(r.stderr_)});
    out.csv = opts.out_dir / (c.name + ".csv");
    write_atomic(out.csv, table.str());
    return out;
}

// ---------------------------------------------------------------------------
// compress

struct QuantGrid {
    double x1_lo = -6.0;
    double x1_hi = 6.0;
    double x2_lo = -3.0;
    double x2_hi = 9.0;
    std::size_t points = 128;  // per axis
};

struct CompressConfig {
    std::vector<EntropyKind> kinds;
    std::vector<double> lambdas;
    std::uint64_t seed = 0;
    RdTrainConfig train;
    std::size_t eval_samples = 100000;
    std::size_t fbm_n = 20;
    std::size_t dfp_m = 3;
    QuantGrid grid;
    std::string name = "compress";
};

inline CompressConfig parse_compress_config(const nlohmann::json& j, const CommandOptions& opts) {
    const std::string where = "compress config";
    detail::check_keys(j,
                       {"entropy_kinds", "lambdas", "seed", "train", "eval_samples", "fbm_n",
                        "dfp_m", "grid", "name"},
                       where);
    CompressConfig c;
    for (const auto& k : detail::get<std::vector<std::string>>(j, "entropy_kinds", where)) {
        try {
            c.kinds.push_back(parse_entropy_kind(k));
        } catch (const std::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    c.lambdas = detail::get<std::vector<double>>(j, "lambdas", where);
    if (c.kinds.empty() || c.lambdas.empty())
        throw ConfigError(where + ": entropy_kinds and lambdas must be non-empty");
    for (double l : c.lambdas)
        if (!(l > 0.0)) throw ConfigError(where + ": lambdas must be positive");
    c.seed = detail::resolve_seed(j, opts, where);
    c.train = opts.paper_scale ? RdTrainConfig::paper() : RdTrainConfig::desk();
    if (j.contains("train")) {
        if (j.at("train").contains("seed"))
            throw ConfigError(where + ": set the seed at the top level, not under \"train\"");
        try {
            apply_overrides(c.train, j.at("train"));
        } catch (const std::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    c.eval_samples = detail::get_or<std::size_t>(j, "eval_samples", 100000, where);
    c.fbm_n = detail::get_or<std::size_t>(j, "fbm_n", 20, where);
    c.dfp_m = detail::get_or<std::size_t>(j, "dfp_m", 3, where);
    if (c.eval_samples < 1 || c.dfp_m < 1)
        throw ConfigError(where + ": eval_samples and dfp_m must be at least 1");
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        const std::string gw = where + " grid";
        detail::check_keys(g, {"x1", "x2", "points"}, gw);
        auto range = [&](const char* key, double& lo, double& hi) {
            if (!g.contains(key)) return;
            const auto r = detail::get<std::vector<double>>(g, key, gw);
            if (r.size() != 2 || !(r[0] < r[1]))
                throw ConfigError(gw + ": " + key + " must be [lo, hi] with lo < hi");
            lo = r[0];
            hi = r[1];
        };
        range("x1", c.grid.x1_lo, c.grid.x1_hi);
        range("x2", c.grid.x2_lo, c.grid.x2_hi);
        c.grid.points = detail::get_or<std::size_t>(g, "points", 128, gw);
        if (c.grid.points < 2) throw ConfigError(gw + ": points must be at least 2");
    }
    c.name = detail::get_name(j, "compress", where);
    return c;
}

/// Seed of one point of a lambda sweep, derived from the base seed.
inline std::uint64_t rd_run_seed(std::uint64_t base, EntropyKind kind, double lambda) {
    return mix64(base ^ fnv1a(std::string(to_string(kind)) + ":" + format_number(lambda)));
}

struct RdRow {
    double lambda = 0.0;
    EntropyKind kind = EntropyKind::fbm;
    std::size_t params_entropy = 0;
    std::uint64_t seed = 0;
    RDPoint point;
};

struct CompressOutputs {
    std::filesystem::path rd_csv;
    std::vector<std::filesystem::path> model_files;
    std::vector<std::filesystem::path> grid_files;
    std::vector<std::filesystem::path> representer_files;
    std::vector<RdRow> rows;
};

inline std::string bin_label(std::span<const double> y) {
    std::string s;
    for (std::size_t d = 0; d < y.size(); ++d)
        s += (d ? ":" : "") + std::to_string(static_cast<long long>(y[d]));
    return s;
}

/// Quantization cells over a regular grid: which bin each grid point lands
/// in, and the decoded representer of every occupied bin.
inline std::pair<std::string, std::string> quantization_dump(const NTCModel& m, const QuantGrid& g,
                                                             const std::string& hash) {
    const NtcCodec codec(m);
    CsvTable cells(hash, {"x1", "x2", "bin"});
    struct Occupied {
        std::vector<double> y;
        std::size_t count = 0;
    };
    std::map<std::string, Occupied> bins;
    for (std::size_t i = 0; i < g.points; ++i) {
        const double x1 = g.x1_lo + (g.x1_hi - g.x1_lo) * double(i) / double(g.points - 1);
        for (std::size_t k = 0; k < g.points; ++k) {
            const double x2 = g.x2_lo + (g.x2_hi - g.x2_lo) * double(k) / double(g.points - 1);
            auto y = codec.encode({x1, x2});
            for (auto& v : y) v = std::round(v);
            const auto label = bin_label(y);
            auto& slot = bins[label];
            slot.y = y;
            ++slot.count;
            cells.row({format_number(x1), format_number(x2), label});
        }
    }
    CsvTable reps(hash, {"bin", "rep_x1", "rep_x2", "n_points"});
    for (const auto& [label, occ] : bins) {
        const auto xh = codec.decode(occ.y);
        reps.row({label, format_number(xh[0]), format_number(xh[1]), std::to_string(occ.count)});
    }
    return {cells.str(), reps.str()};
}

inline CompressOutputs cmd_compress(const nlohmann::json& config, const CommandOptions& opts = {}) {
    const CompressConfig c = parse_compress_config(config, opts);
    const std::string hash = config_hash(config, opts);
    struct Job {
        EntropyKind kind;
        double lambda;
    };
    std::vector<Job> jobs;
    for (EntropyKind kind : c.kinds)
        for (double lambda : c.lambdas) jobs.push_back({kind, lambda});

    CompressOutputs out;
    out.rows.resize(jobs.size());
    std::vector<NTCModel> models(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        NtcShape shape;
        shape.entropy = jobs[i].kind;
        shape.fbm_n = c.fbm_n;
        shape.dfp_m = c.dfp_m;
        RdTrainConfig cfg = c.train;
        cfg.seed = rd_run_seed(c.seed, jobs[i].kind, jobs[i].lambda);
        models[i] = train_rd(shape, jobs[i].lambda, cfg).model;
        out.rows[i] = {jobs[i].lambda, jobs[i].kind, shape.entropy_params(), cfg.seed,
                       eval_quantized(models[i], c.eval_samples, cfg.seed)};
    });

    CsvTable table(hash, {"lambda", "rate_bits", "mse", "entropy_kind", "params_entropy", "seed"});
    for (const auto& r : out.rows)
        table.row({format_number(r.lambda), format_number(r.point.rate),
                   format_number(r.point.distortion), to_string(r.kind),
                   std::to_string(r.params_entropy), std::to_string(r.seed)});
    out.rd_csv = opts.out_dir / (c.name + "_rd.csv");
    write_atomic(out.rd_csv, table.str());

    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const std::string stem =
            c.name + "_" + to_string(jobs[i].kind) + "_lambda" + format_number(jobs[i].lambda);
        nlohmann::json doc = models[i];
        doc["config_hash"] = hash;
        doc["seed"] = out.rows[i].seed;
        out.model_files.push_back(opts.out_dir / (stem + "_model.json"));
        write_atomic(out.model_files.back(), doc.dump(2) + "\n");
        const auto [cells, reps] = quantization_dump(models[i], c.grid, hash);
        out.grid_files.push_back(opts.out_dir / (stem + "_grid.csv"));
        write_atomic(out.grid_files.back(), cells);
        out.representer_files.push_back(opts.out_dir / (stem + "_representers.csv"));
        write_atomic(out.representer_files.back(), reps);
    }
    return out;
}

// ---------------------------------------------------------------------------
// selftest

/// Quick numerical sanity checks; prints one line per check and returns
/// true when all pass.
inline bool run_selftest(std::ostream& os) {
    bool all = true;
    auto report = [&](const std::string& name, bool ok, const std::string& detail) {
        os << (ok ? "PASS " : "FAIL ") << name << ": " << detail << '\n';
        all = all && ok;
    };

    Rng rng = Rng::stream(0, "selftest");
    double worst_mass = 0.0;
    double min_pdf = 1.0;
    for (int draw = 0; draw < 20; ++draw) {
        auto p = FourierDensityParams::initial(8, rng);
        for (std::size_t k = 0; k < p.a.size(); ++k) {
            p.a.re[k] = rng.normal();
            p.a.im[k] = rng.normal();
        }
        const FourierDensity f(p);
        const double mass = simpson([&](double x) { return f.pdf_periodic(x); }, -1.0 + 1e-12,
                                    1.0 - 1e-12, 4096);
        worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
        for (int i = 0; i < 512; ++i) min_pdf = std::min(min_pdf, f.pdf_periodic(-1.0 + (i + 0.5) / 256.0));
    }
    report("fbm normalization", worst_mass < 1e-8, "max |mass - 1| = " + format_number(worst_mass));
    report("fbm non-negative", min_pdf >= -1e-10, "min pdf = " + format_number(min_pdf));

    const std::vector<double> x{-0.3, 0.1, 0.7};
    auto params = FourierDensityParams::initial(4, rng);
    for (std::size_t k = 0; k < params.a.size(); ++k) params.a.re[k] = rng.normal();
    const auto check = ad::check_gradient(
        [&](auto& tape, auto p) {
            auto xs = tape.constant(std::span<const double>(x), x.size(), 1);
            return fbm_neg_log_likelihood(p, xs, 4, Domain::periodic);
        },
        params.flat());
    report("fbm gradient", check.max_rel_error < 1e-5,
           "max relative error = " + format_number(check.max_rel_error));

    try {
        NtcShape shape;
        RdTrainConfig cfg;
        cfg.epochs = 1;
        cfg.steps_per_epoch = 5;
        cfg.batch_size = 64;
        const auto r = train_rd(shape, 10.0, cfg);
        const auto pt = eval_quantized(r.model, 256, 0);
        report("compression pipeline", std::isfinite(pt.rate) && std::isfinite(pt.distortion),
               "rate = " + format_number(pt.rate) + " bits, mse = " + format_number(pt.distortion));
    } catch (const std::exception& e) {
        report("compression pipeline", false, e.what());
    }
    return all;
}

}  // namespace fbm

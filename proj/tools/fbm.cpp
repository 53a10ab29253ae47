// Command-line driver: fbm {fit|sweep|compress|selftest} [options]

#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fbm/experiments.hpp"

namespace {

nlohmann::json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw fbm::ConfigError("cannot read config file " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw fbm::ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
}

void print_outputs(const std::vector<std::filesystem::path>& files) {
    for (const auto& f : files) std::cout << "wrote " << f.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fourier basis density models: fitting, budget sweeps and transform coding"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    bool paper_scale = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON experiment config")->required();
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out-dir", out_dir, "directory for output files");
        cmd->add_flag("--paper-scale", paper_scale, "use the full-length training schedule");
    };
    auto* fit = app.add_subcommand("fit", "fit one density model to a target");
    auto* sweep = app.add_subcommand("sweep", "fit several models across budgets and seeds");
    auto* compress = app.add_subcommand("compress", "rate-distortion sweep on the banana source");
    auto* selftest = app.add_subcommand("selftest", "run quick numerical checks");
    add_common(fit);
    add_common(sweep);
    add_common(compress);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    if (selftest->parsed()) return fbm::run_selftest(std::cout) ? 0 : 1;

    fbm::CommandOptions opts;
    opts.out_dir = out_dir;
    opts.paper_scale = paper_scale;
    for (auto* cmd : {fit, sweep, compress})
        if (cmd->parsed() && cmd->count("--seed")) opts.seed = seed;

    try {
        const auto config = load_config(config_path);
        if (fit->parsed()) {
            const auto out = fbm::cmd_fit(config, opts);
            print_outputs({out.model_json, out.metrics_csv, out.density_csv});
            std::cout << "kld_quadrature " << fbm::format_number(*out.report.kld_quadrature)
                      << "\nkld_mc " << fbm::format_number(out.report.kld_mc->kld) << " +- "
                      << fbm::format_number(out.report.kld_mc->stderr_) << '\n';
        } else if (sweep->parsed()) {
            const auto out = fbm::cmd_sweep(config, opts);
            print_outputs({out.csv});
        } else {
            const auto out = fbm::cmd_compress(config, opts);
            print_outputs({out.rd_csv});
            print_outputs(out.model_files);
            print_outputs(out.grid_files);
            print_outputs(out.representer_files);
        }
    } catch (const fbm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

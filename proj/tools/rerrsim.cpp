#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "rerrsim/oracle.hpp"
#include "rerrsim/scenario.hpp"

namespace fs = std::filesystem;
using namespace rerrsim::harness;

namespace {

int report_config_error(const std::string& path, const ConfigError& e) {
    for (const auto& issue : e.issues()) {
        std::cerr << path << ':';
        if (issue.line) std::cerr << issue.line << ':';
        std::cerr << " error: " << issue.message << '\n';
    }
    return 1;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rerrsim: route-error propagation simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint32_t> trials;
    std::string out_dir;
    std::string format = "csv";
    bool trace = false;
    unsigned threads = 1;

    auto* run = app.add_subcommand("run", "run a scenario and emit its metrics report");
    run->add_option("config", config_path, "scenario config file")->required();
    run->add_option("--seed", seed, "base seed (trial i uses seed + i)");
    run->add_option("--trials", trials, "number of trials")->check(CLI::PositiveNumber);
    run->add_option("--out", out_dir, "output directory (default: $RERRSIM_OUT_DIR or .)");
    run->add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));
    run->add_flag("--trace", trace, "also write the trial-0 event trace");
    run->add_option("--threads", threads, "concurrent trials")->check(CLI::PositiveNumber);

    auto* validate = app.add_subcommand("validate", "check a scenario config");
    validate->add_option("config", config_path, "scenario config file")->required();

    std::uint32_t oracle_trials = 1000;
    auto* oracle = app.add_subcommand("oracle", "Monte Carlo per-n loss frequency against the estimator");
    oracle->add_option("config", config_path, "scenario config file")->required();
    oracle->add_option("--trials", oracle_trials, "number of trials")->required()->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    ScenarioConfig config;
    try {
        config = load_config(config_path);
    } catch (const ConfigError& e) {
        return report_config_error(config_path, e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (*validate) {
            std::cout << config_path << ": ok (" << config.nodes.size() << " nodes, " << config.links.size()
                      << " links, " << config.failures.size() << " failures)\n";
            return 0;
        }

        if (*oracle) {
            const auto result = monte_carlo_loss_oracle(config, oracle_trials);
            std::printf("trials=%u trials_with_rerr=%u\n", result.trials, result.trials_with_rerr);
            std::printf("%4s %8s %10s %10s %10s\n", "n", "samples", "empirical", "predicted", "abs_diff");
            for (const auto& r : result.rows) {
                std::printf("%4u %8llu %10.4f %10.4f %10.4f\n", r.n, static_cast<unsigned long long>(r.samples),
                            r.empirical, r.predicted, std::fabs(r.empirical - r.predicted));
            }
            if (!result.frames.empty()) {
                std::printf("%6s %8s %10s %10s\n", "frame", "samples", "empirical", "predicted");
                for (const auto& f : result.frames) {
                    std::printf("%6u %8llu %10.4f %10.4f\n", f.frame, static_cast<unsigned long long>(f.samples),
                                f.empirical, f.predicted);
                }
            }
            return 0;
        }

        if (seed) config.seed = *seed;
        if (trials) config.trials = *trials;
        fs::path dir = ".";
        if (!out_dir.empty()) {
            dir = out_dir;
        } else if (const char* env = std::getenv("RERRSIM_OUT_DIR"); env && *env) {
            dir = env;
        }
        fs::create_directories(dir);

        const auto result = run_scenario(config, threads);
        const auto& m = result.report;
        const fs::path report_path = dir / (config.name + "." + format);
        write_file(report_path, format == "json" ? to_json(m) : to_csv(m));
        if (trace) write_file(dir / (config.name + ".trace.tsv"), result.trace.to_string());

        std::printf("%s: trials=%u delivery_ratio=%.4f rerr_success=%.4f app_duplicates=%g conservation=%s "
                    "bounded_effort=%s\n",
                    config.name.c_str(), m.trials, m.delivery_ratio, m.rerr_success, m.app_duplicates,
                    m.conservation_ok ? "ok" : "VIOLATED", m.effort_ok ? "ok" : "VIOLATED");
        std::printf("wrote %s\n", report_path.string().c_str());
        return m.invariants_ok() ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

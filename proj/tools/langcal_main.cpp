// Command-line driver for the Langevin calibration pipeline.
//
// Subcommands map onto pipeline stages; all numeric outputs land under the
// output directory with a manifest.json recording config, stage timings, and
// content hashes. Exit codes: 0 success, 2 configuration error, 3 stage
// failure.

#include "langcal/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

namespace {

struct GlobalOptions {
    std::string config_path;
    std::string preset = "desk-affine2d";
    std::string out_dir;
    long long seed = -1;
    std::size_t threads = 0;
};

langcal::RunConfig resolve_config(const GlobalOptions& opts) {
    langcal::RunConfig cfg = opts.config_path.empty()
                                 ? langcal::preset_by_name(opts.preset)
                                 : langcal::load_run_config(opts.config_path);
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    if (opts.seed >= 0) {
        cfg.seed = static_cast<std::uint64_t>(opts.seed);
        cfg.data.seed = cfg.seed;
        cfg.rom_sim.seed = cfg.seed + 1000;
    }
    if (opts.threads > 0) cfg.threads = opts.threads;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"langcal: score-based Langevin reduced-order model calibration"};
    app.require_subcommand(1);

    GlobalOptions opts;
    app.add_option("--config", opts.config_path, "JSON run configuration file");
    app.add_option("--preset", opts.preset,
                   "named preset: paper-affine2d, desk-affine2d, cir-analytic, cir-mc, ou-oracle");
    app.add_option("--out", opts.out_dir, "output directory (overrides config)");
    app.add_option("--seed", opts.seed, "seed (overrides config)");
    app.add_option("--threads", opts.threads, "worker threads (0 = hardware)");

    std::string dump_path;
    auto* dump = app.add_subcommand("dump-config", "write the resolved config as JSON and exit");
    dump->add_option("path", dump_path, "destination file")->required();

    auto* generate = app.add_subcommand("generate", "generate or ingest the reference dataset");
    auto* train_scores = app.add_subcommand("train-scores", "train stationary and joint score models");
    auto* correlations = app.add_subcommand("correlations", "lagged correlation curves and Phi");
    auto* fit_mobility = app.add_subcommand("fit-mobility", "train the neural mobility correction");
    auto* simulate = app.add_subcommand("simulate-rom", "simulate learned and constant-closure models");
    auto* validate = app.add_subcommand("validate", "forward-validation report");
    auto* run_all = app.add_subcommand("run-all", "run every stage for the configured experiment");
    auto* cir = app.add_subcommand("cir-analytic", "closed-form CIR benchmark report");

    CLI11_PARSE(app, argc, argv);

    langcal::RunConfig cfg;
    try {
        cfg = resolve_config(opts);
        if (dump->parsed()) {
            langcal::save_run_config(cfg, dump_path);
            std::printf("wrote %s\n", dump_path.c_str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    }

    try {
        langcal::Pipeline pipeline(cfg);
        if (generate->parsed()) pipeline.generate();
        if (train_scores->parsed()) pipeline.train_scores();
        if (correlations->parsed()) pipeline.correlations();
        if (fit_mobility->parsed()) pipeline.fit_mobility();
        if (simulate->parsed()) pipeline.simulate_roms();
        if (validate->parsed()) pipeline.validate_stage();
        if (run_all->parsed()) pipeline.run_all();
        if (cir->parsed()) pipeline.cir_analytic_stage();
        std::printf("done; outputs under %s\n", pipeline.out_dir().c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stage failure: %s\n", e.what());
        return 3;
    }
}

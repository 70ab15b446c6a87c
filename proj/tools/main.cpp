#include <string>

#include "CLI11.hpp"
#include "fedsim/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Federated backbone training simulator"};
    app.require_subcommand(1);

    fedsim::CliOptions opts;
    std::string config_path;
    std::string checkpoint_path;
    int resolution = 10;
    int instances = 20;
    double fd_step = 1e-5;
    bool perturb = false;
    std::uint64_t seed_override = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--out", opts.out_override, "Output root (overrides FEDSIM_OUT_ROOT)");
        cmd->add_option("--threads", opts.threads, "Worker threads")->check(CLI::PositiveNumber);
        cmd->add_option("--seed-override", seed_override,
                        "Re-derive all four seed streams from this value");
    };

    CLI::App* run = app.add_subcommand("run", "Execute one experiment");
    run->add_option("--config", config_path, "Config JSON path")->required();
    add_common(run);

    CLI::App* cmp = app.add_subcommand("compare", "Run all five methods on identical seeds");
    cmp->add_option("--config", config_path, "Config JSON path")->required();
    add_common(cmp);

    CLI::App* grid = app.add_subcommand("gridsearch", "Score the weighting simplex lattice");
    grid->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
    grid->add_option("--resolution", resolution, "Lattice resolution");
    add_common(grid);

    CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    gc->add_option("--config", config_path, "Config JSON path (defaults used when absent)");
    gc->add_option("--instances", instances, "Number of seeded instances")
        ->check(CLI::PositiveNumber);
    gc->add_option("--fd-step", fd_step, "Central-difference step");
    gc->add_flag("--perturb", perturb, "Corrupt the analytic gradient (must then fail)");
    add_common(gc);

    CLI11_PARSE(app, argc, argv);

    for (CLI::App* cmd : {run, cmp, grid, gc}) {
        if (cmd->parsed() && cmd->count("--seed-override") > 0) {
            opts.has_seed_override = true;
            opts.seed_override = seed_override;
        }
    }

    if (run->parsed()) return fedsim::cmd_run(config_path, opts);
    if (cmp->parsed()) return fedsim::cmd_compare(config_path, opts);
    if (grid->parsed()) return fedsim::cmd_gridsearch(checkpoint_path, resolution, opts);
    return fedsim::cmd_gradcheck(config_path, instances, fd_step, perturb, opts);
}

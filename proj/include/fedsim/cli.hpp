#pragma once

#include <cstdint>
#include <string>

#include "fedsim/fed_core.hpp"
#include "fedsim/fv.hpp"
#include "fedsim/sim.hpp"

namespace fedsim {

struct CliOptions {
    std::string out_override;  // empty = use FEDSIM_OUT_ROOT or config.output_dir
    bool has_seed_override = false;
    std::uint64_t seed_override = 0;
    int threads = 1;
};

// Exit codes: 0 success, 2 config/usage error, 3 divergence.
int cmd_run(const std::string& config_path, const CliOptions& opts);
int cmd_compare(const std::string& config_path, const CliOptions& opts);
int cmd_gridsearch(const std::string& checkpoint_path, int resolution, const CliOptions& opts);
int cmd_gradcheck(const std::string& config_path, int instances, double fd_step, bool perturb,
                  const CliOptions& opts);

// Validation-shard verification scorers rebuilt from a checkpoint's embedded
// config; self-contained copies, shared by gridsearch and its search oracles.
std::vector<ScoreFn> scorers_from_checkpoint(const Checkpoint& ckpt);

// CSV cell formatting for doubles ("%.17g", value-exact round trip).
std::string csv_double(double v);

std::string resolve_out_root(const std::string& override_dir, const std::string& config_dir);

}  // namespace fedsim

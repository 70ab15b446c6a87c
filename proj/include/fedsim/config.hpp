#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/fed_core.hpp"
#include "fedsim/fv.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

enum class Method { kCentralized, kFedAvg, kFedAvgFv, kPfm, kPfmFv };

Method parse_method(const std::string& name);
const char* to_string(Method m);

// Four independent streams so, e.g., the dataset can be pinned while the
// model initialization varies across arms.
struct Seeds {
    std::uint64_t data = 1;
    std::uint64_t init = 2;
    std::uint64_t fv = 3;
    std::uint64_t batching = 4;
};

enum class InitialWeighting { kSizeProportional, kUniform };

// Decay boundaries at 40%, 70%, and 92% of the round budget.
std::vector<int> default_decay_rounds(int rounds);

struct ExperimentConfig {
    Method method = Method::kPfm;
    HyperParams hyper;
    FvParams fv;
    PartitionPlan data;
    BackboneSpec backbone;
    HeadLoss head_loss = HeadLoss::kSoftmaxCe;
    double head_scale_s = 64.0;
    double head_margin_m = 0.35;
    ScoreKind validator = ScoreKind::kVerification;
    Seeds seeds;
    std::string output_dir = "runs";
    int checkpoint_every = 0;  // 0 = final checkpoint only
    InitialWeighting initial_weighting = InitialWeighting::kSizeProportional;

    ExperimentConfig() { hyper.lr.decay_rounds = default_decay_rounds(hyper.rounds); }

    HeadSpec head_for(int num_classes) const;
    bool fv_enabled() const { return method == Method::kFedAvgFv || method == Method::kPfmFv; }
    void validate() const;
};

// Strict parse: unknown keys are errors, every violation is reported as
// "<json.path>: <constraint>, got <value>". Missing keys take defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// All fields explicit, keys sorted; parse(to_json(c)) == c.
std::string to_json(const ExperimentConfig& config);

// FNV-1a over the canonical serialization, as 16 hex digits; names run dirs.
std::string config_hash(const ExperimentConfig& config);

}  // namespace fedsim

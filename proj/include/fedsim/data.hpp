#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

// Synthetic cross-silo partition: every party owns a globally disjoint set of
// Gaussian class clusters, sized heterogeneously via samples_scale. Class
// means sit on a sphere of radius class_separation.
struct PartitionPlan {
    int num_parties = 3;
    std::vector<int> classes_per_party = {8, 4, 4};
    int samples_per_class = 24;
    std::vector<double> samples_scale = {4.0, 2.0, 1.0};  // per-party multiplier
    int input_dim = 16;
    double class_separation = 4.0;
    double noise_sigma = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
    int total_classes() const;
};

struct PartyData {
    int party_id = 0;
    int global_class_offset = 0;
    Batch train;  // labels are local: [0, classes_per_party[party_id])
};

// Private validation shard with fold structure; folds are disjoint and
// partition the shard. Labels are local to the owning party.
struct ValidationShard {
    int owner = 0;
    std::vector<Batch> folds;

    std::size_t sample_count() const;
};

struct GeneratedData {
    std::vector<PartyData> parties;
    std::vector<ValidationShard> shards;  // one per party, 5 folds each
};

// Deterministic generation: the same plan yields bitwise identical data.
// Validation samples are fresh draws from the same clusters (no overlap with
// training); each party holds out max(10, train_per_class/4) per class.
GeneratedData generate(const PartitionPlan& plan);

// Splits a party's training set into 4 near-equal disjoint shards via a
// seeded shuffle; sizes differ by at most one and labels are preserved.
std::vector<PartyData> split_quarters(const PartyData& party, std::uint64_t seed);

// Self-describing binary export of a generated dataset for reuse across runs.
void save_dataset(const GeneratedData& data, const PartitionPlan& plan, const std::string& path);
GeneratedData load_dataset(const std::string& path);

}  // namespace fedsim

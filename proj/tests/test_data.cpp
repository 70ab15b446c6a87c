#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "fedsim/data.hpp"

using namespace fedsim;

namespace {

std::vector<std::vector<double>> class_means_from_train(const PartyData& party, int classes,
                                                        std::size_t dim) {
    std::vector<std::vector<double>> means(static_cast<std::size_t>(classes),
                                           std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    for (std::size_t i = 0; i < party.train.size(); ++i) {
        const int y = party.train.labels[i];
        counts[static_cast<std::size_t>(y)] += 1;
        for (std::size_t d = 0; d < dim; ++d)
            means[static_cast<std::size_t>(y)][d] += party.train.inputs.at(i, d);
    }
    for (int c = 0; c < classes; ++c)
        for (std::size_t d = 0; d < dim; ++d)
            means[static_cast<std::size_t>(c)][d] /= counts[static_cast<std::size_t>(c)];
    return means;
}

bool batches_equal(const Batch& a, const Batch& b) {
    return a.inputs.rows == b.inputs.rows && a.inputs.cols == b.inputs.cols &&
           a.inputs.data == b.inputs.data && a.labels == b.labels;
}

}  // namespace

TEST_CASE("generation is bitwise deterministic for a fixed plan") {
    const PartitionPlan plan;
    const GeneratedData a = generate(plan);
    const GeneratedData b = generate(plan);
    REQUIRE(a.parties.size() == b.parties.size());
    for (std::size_t p = 0; p < a.parties.size(); ++p) {
        CHECK(batches_equal(a.parties[p].train, b.parties[p].train));
        REQUIRE(a.shards[p].folds.size() == b.shards[p].folds.size());
        for (std::size_t f = 0; f < a.shards[p].folds.size(); ++f)
            CHECK(batches_equal(a.shards[p].folds[f], b.shards[p].folds[f]));
    }

    PartitionPlan other = plan;
    other.seed = plan.seed + 1;
    const GeneratedData c = generate(other);
    CHECK_FALSE(batches_equal(a.parties[0].train, c.parties[0].train));
}

TEST_CASE("the default partition is heterogeneous with disjoint global classes") {
    const PartitionPlan plan;
    CHECK(plan.total_classes() == 16);
    const GeneratedData data = generate(plan);
    REQUIRE(data.parties.size() == 3);
    REQUIRE(data.shards.size() == 3);

    CHECK(data.parties[0].global_class_offset == 0);
    CHECK(data.parties[1].global_class_offset == 8);
    CHECK(data.parties[2].global_class_offset == 12);

    // Per-class train sizes scale 4x / 2x / 1x off samples_per_class = 24.
    CHECK(data.parties[0].train.size() == 8 * 96);
    CHECK(data.parties[1].train.size() == 4 * 48);
    CHECK(data.parties[2].train.size() == 4 * 24);

    // Held-out per class: max(10, train_per_class / 4).
    CHECK(data.shards[0].sample_count() == 8 * 24);
    CHECK(data.shards[1].sample_count() == 4 * 12);
    CHECK(data.shards[2].sample_count() == 4 * 10);

    for (std::size_t p = 0; p < 3; ++p) {
        const int classes = plan.classes_per_party[p];
        for (const int y : data.parties[p].train.labels) {
            CHECK(y >= 0);
            CHECK(y < classes);
        }
        CHECK(data.parties[p].train.inputs.cols == 16);
    }
}

TEST_CASE("every validation fold covers every local class") {
    const GeneratedData data = generate(PartitionPlan{});
    const std::vector<int> classes = {8, 4, 4};
    for (std::size_t p = 0; p < 3; ++p) {
        REQUIRE(data.shards[p].folds.size() == 5);
        for (const Batch& fold : data.shards[p].folds) {
            std::map<int, int> per_class;
            for (const int y : fold.labels) per_class[y] += 1;
            CHECK(static_cast<int>(per_class.size()) == classes[p]);
            for (const auto& [y, n] : per_class) CHECK(n >= 2);
        }
    }
}

TEST_CASE("clusters are tight enough for a nearest-mean classifier") {
    const PartitionPlan plan;
    const GeneratedData data = generate(plan);
    for (std::size_t p = 0; p < data.parties.size(); ++p) {
        const int classes = plan.classes_per_party[p];
        const auto means = class_means_from_train(data.parties[p], classes, 16);
        std::size_t correct = 0, total = 0;
        for (const Batch& fold : data.shards[p].folds) {
            for (std::size_t i = 0; i < fold.size(); ++i) {
                int best = 0;
                double best_d = std::numeric_limits<double>::infinity();
                for (int c = 0; c < classes; ++c) {
                    double d = 0.0;
                    for (std::size_t k = 0; k < 16; ++k) {
                        const double diff = fold.inputs.at(i, k) - means[static_cast<std::size_t>(c)][k];
                        d += diff * diff;
                    }
                    if (d < best_d) {
                        best_d = d;
                        best = c;
                    }
                }
                total += 1;
                if (best == fold.labels[i]) correct += 1;
            }
        }
        CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.9);
    }
}

TEST_CASE("cluster geometry matches the plan parameters") {
    PartitionPlan plan;
    plan.num_parties = 1;
    plan.classes_per_party = {4};
    plan.samples_scale = {1.0};
    plan.samples_per_class = 400;
    plan.class_separation = 4.0;
    plan.noise_sigma = 1.0;
    const GeneratedData data = generate(plan);
    const auto means = class_means_from_train(data.parties[0], 4, 16);

    for (int c = 0; c < 4; ++c) {
        double norm_sq = 0.0;
        for (const double m : means[static_cast<std::size_t>(c)]) norm_sq += m * m;
        CHECK(std::sqrt(norm_sq) == doctest::Approx(4.0).epsilon(0.08));
    }

    // Residual noise around the class mean should have unit-ish variance.
    double sum_sq = 0.0;
    std::size_t n = 0;
    const PartyData& party = data.parties[0];
    for (std::size_t i = 0; i < party.train.size(); ++i) {
        const auto& mean = means[static_cast<std::size_t>(party.train.labels[i])];
        for (std::size_t d = 0; d < 16; ++d) {
            const double r = party.train.inputs.at(i, d) - mean[d];
            sum_sq += r * r;
            n += 1;
        }
    }
    CHECK(sum_sq / static_cast<double>(n) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("quarter split partitions 402 samples into 101 101 100 100") {
    PartitionPlan plan;
    plan.num_parties = 1;
    plan.classes_per_party = {2};
    plan.samples_scale = {1.0};
    plan.samples_per_class = 201;
    const GeneratedData data = generate(plan);
    const PartyData& party = data.parties[0];
    REQUIRE(party.train.size() == 402);

    const auto quarters = split_quarters(party, 77);
    REQUIRE(quarters.size() == 4);
    CHECK(quarters[0].train.size() == 101);
    CHECK(quarters[1].train.size() == 101);
    CHECK(quarters[2].train.size() == 100);
    CHECK(quarters[3].train.size() == 100);

    // Disjoint union: the multiset of (first coordinate, label) pairs survives.
    std::multiset<std::pair<double, int>> before, after;
    for (std::size_t i = 0; i < party.train.size(); ++i)
        before.emplace(party.train.inputs.at(i, 0), party.train.labels[i]);
    for (const PartyData& q : quarters) {
        CHECK(q.party_id == party.party_id);
        CHECK(q.global_class_offset == party.global_class_offset);
        for (std::size_t i = 0; i < q.train.size(); ++i)
            after.emplace(q.train.inputs.at(i, 0), q.train.labels[i]);
    }
    CHECK(before == after);

    const auto again = split_quarters(party, 77);
    for (std::size_t q = 0; q < 4; ++q) CHECK(batches_equal(quarters[q].train, again[q].train));
    const auto reshuffled = split_quarters(party, 78);
    CHECK_FALSE(batches_equal(quarters[0].train, reshuffled[0].train));
}

TEST_CASE("datasets survive a save and load round trip") {
    PartitionPlan plan;
    plan.samples_per_class = 8;
    plan.samples_scale = {2.0, 1.0, 1.0};
    const GeneratedData data = generate(plan);

    const auto path = std::filesystem::temp_directory_path() / "fedsim_test_dataset.bin";
    save_dataset(data, plan, path.string());
    const GeneratedData back = load_dataset(path.string());
    std::filesystem::remove(path);

    REQUIRE(back.parties.size() == data.parties.size());
    for (std::size_t p = 0; p < data.parties.size(); ++p) {
        CHECK(back.parties[p].party_id == data.parties[p].party_id);
        CHECK(back.parties[p].global_class_offset == data.parties[p].global_class_offset);
        CHECK(batches_equal(back.parties[p].train, data.parties[p].train));
        CHECK(back.shards[p].owner == data.shards[p].owner);
        REQUIRE(back.shards[p].folds.size() == data.shards[p].folds.size());
        for (std::size_t f = 0; f < data.shards[p].folds.size(); ++f)
            CHECK(batches_equal(back.shards[p].folds[f], data.shards[p].folds[f]));
    }

    CHECK_THROWS(load_dataset((std::filesystem::temp_directory_path() / "no_such_file.bin").string()));
}

TEST_CASE("partition plans are validated") {
    PartitionPlan plan;
    plan.classes_per_party = {8, 4};
    CHECK_THROWS_AS(generate(plan), std::invalid_argument);

    PartitionPlan bad_scale;
    bad_scale.samples_scale = {1.0, 0.0, 1.0};
    CHECK_THROWS_AS(generate(bad_scale), std::invalid_argument);

    PartitionPlan bad_sigma;
    bad_sigma.noise_sigma = 0.0;
    CHECK_THROWS_AS(generate(bad_sigma), std::invalid_argument);
}

#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr int kNumFolds = 5;
constexpr char kDatasetMagic[8] = {'F', 'S', 'D', 'A', 'T', 'A', '0', '1'};

std::vector<double> unit_vector(int dim, Rng& rng) {
    std::vector<double> v(dim);
    for (;;) {
        double norm_sq = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm_sq += x * x;
        }
        if (norm_sq > 1e-24) {
            const double inv = 1.0 / std::sqrt(norm_sq);
            for (double& x : v) x *= inv;
            return v;
        }
    }
}

int scaled_train_count(const PartitionPlan& plan, int party) {
    const double scale = plan.samples_scale.empty() ? 1.0 : plan.samples_scale[party];
    return std::max(1, static_cast<int>(std::lround(plan.samples_per_class * scale)));
}

int held_out_count(int train_per_class) {
    return std::max(2 * kNumFolds, train_per_class / 4);
}

void append_sample(Batch& batch, const std::vector<double>& mean, double sigma, int label,
                   Rng& rng) {
    for (double m : mean) batch.inputs.data.push_back(m + sigma * rng.normal());
    batch.inputs.rows += 1;
    batch.labels.push_back(label);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw std::runtime_error("dataset file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

void write_batch(std::ostream& out, const Batch& batch) {
    write_u64(out, batch.inputs.rows);
    write_u64(out, batch.inputs.cols);
    ParamVec::from_values(batch.inputs.data).write_record(out);
    write_u64(out, batch.labels.size());
    for (int label : batch.labels) write_u64(out, static_cast<std::uint64_t>(label));
}

Batch read_batch(std::istream& in) {
    Batch batch;
    batch.inputs.rows = read_u64(in);
    batch.inputs.cols = read_u64(in);
    batch.inputs.data = ParamVec::read_record(in).values();
    if (batch.inputs.data.size() != batch.inputs.rows * batch.inputs.cols)
        throw std::runtime_error("dataset file corrupt: matrix size mismatch");
    const std::uint64_t n = read_u64(in);
    batch.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) batch.labels[i] = static_cast<int>(read_u64(in));
    return batch;
}

}  // namespace

void PartitionPlan::validate() const {
    if (num_parties < 1) throw std::invalid_argument("PartitionPlan: num_parties must be positive");
    if (static_cast<int>(classes_per_party.size()) != num_parties)
        throw std::invalid_argument("PartitionPlan: classes_per_party length mismatch");
    for (int c : classes_per_party) {
        if (c < 1) throw std::invalid_argument("PartitionPlan: classes_per_party entries positive");
    }
    if (!samples_scale.empty() && static_cast<int>(samples_scale.size()) != num_parties)
        throw std::invalid_argument("PartitionPlan: samples_scale length mismatch");
    for (double s : samples_scale) {
        if (s <= 0.0) throw std::invalid_argument("PartitionPlan: samples_scale entries positive");
    }
    if (samples_per_class < 1)
        throw std::invalid_argument("PartitionPlan: samples_per_class must be positive");
    if (input_dim < 1) throw std::invalid_argument("PartitionPlan: input_dim must be positive");
    if (class_separation <= 0.0)
        throw std::invalid_argument("PartitionPlan: class_separation must be positive");
    if (noise_sigma <= 0.0)
        throw std::invalid_argument("PartitionPlan: noise_sigma must be positive");
}

int PartitionPlan::total_classes() const {
    return std::accumulate(classes_per_party.begin(), classes_per_party.end(), 0);
}

std::size_t ValidationShard::sample_count() const {
    std::size_t n = 0;
    for (const Batch& fold : folds) n += fold.size();
    return n;
}

GeneratedData generate(const PartitionPlan& plan) {
    plan.validate();
    Rng rng(plan.seed);

    GeneratedData out;
    out.parties.reserve(plan.num_parties);
    out.shards.reserve(plan.num_parties);

    int class_offset = 0;
    for (int p = 0; p < plan.num_parties; ++p) {
        const int classes = plan.classes_per_party[p];
        const int train_n = scaled_train_count(plan, p);
        const int val_n = held_out_count(train_n);

        PartyData party;
        party.party_id = p;
        party.global_class_offset = class_offset;
        party.train.inputs.cols = static_cast<std::size_t>(plan.input_dim);

        ValidationShard shard;
        shard.owner = p;
        shard.folds.assign(kNumFolds, Batch{});
        for (Batch& fold : shard.folds) fold.inputs.cols = static_cast<std::size_t>(plan.input_dim);

        for (int c = 0; c < classes; ++c) {
            std::vector<double> mean = unit_vector(plan.input_dim, rng);
            for (double& m : mean) m *= plan.class_separation;

            for (int i = 0; i < train_n; ++i)
                append_sample(party.train, mean, plan.noise_sigma, c, rng);
            // Fresh held-out draws, dealt round-robin so every fold sees
            // every class.
            for (int i = 0; i < val_n; ++i)
                append_sample(shard.folds[i % kNumFolds], mean, plan.noise_sigma, c, rng);
        }

        out.parties.push_back(std::move(party));
        out.shards.push_back(std::move(shard));
        class_offset += classes;
    }
    return out;
}

std::vector<PartyData> split_quarters(const PartyData& party, std::uint64_t seed) {
    const std::size_t n = party.train.size();
    if (n < 4) throw std::invalid_argument("split_quarters: need at least 4 samples");

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(party.party_id)));
    rng.shuffle(order);

    const std::size_t cols = party.train.inputs.cols;
    std::vector<PartyData> quarters(4);
    std::size_t cursor = 0;
    for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t size = n / 4 + (q < n % 4 ? 1 : 0);
        PartyData& part = quarters[q];
        part.party_id = party.party_id;
        part.global_class_offset = party.global_class_offset;
        part.train.inputs.cols = cols;
        part.train.inputs.data.reserve(size * cols);
        for (std::size_t i = 0; i < size; ++i) {
            const std::uint32_t src = order[cursor++];
            const double* row = party.train.inputs.row(src);
            part.train.inputs.data.insert(part.train.inputs.data.end(), row, row + cols);
            part.train.inputs.rows += 1;
            part.train.labels.push_back(party.train.labels[src]);
        }
    }
    return quarters;
}

void save_dataset(const GeneratedData& data, const PartitionPlan& plan, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    out.write(kDatasetMagic, sizeof(kDatasetMagic));
    write_u64(out, static_cast<std::uint64_t>(plan.input_dim));
    write_u64(out, plan.seed);
    write_u64(out, data.parties.size());
    for (std::size_t p = 0; p < data.parties.size(); ++p) {
        const PartyData& party = data.parties[p];
        write_u64(out, static_cast<std::uint64_t>(party.party_id));
        write_u64(out, static_cast<std::uint64_t>(party.global_class_offset));
        write_batch(out, party.train);
        const ValidationShard& shard = data.shards[p];
        write_u64(out, shard.folds.size());
        for (const Batch& fold : shard.folds) write_batch(out, fold);
    }
    if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

GeneratedData load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    char magic[sizeof(kDatasetMagic)];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + sizeof(magic), kDatasetMagic))
        throw std::runtime_error("load_dataset: bad magic in " + path);
    read_u64(in);  // input_dim, implied by the batches
    read_u64(in);  // seed, informational
    const std::uint64_t parties = read_u64(in);

    GeneratedData data;
    for (std::uint64_t p = 0; p < parties; ++p) {
        PartyData party;
        party.party_id = static_cast<int>(read_u64(in));
        party.global_class_offset = static_cast<int>(read_u64(in));
        party.train = read_batch(in);
        ValidationShard shard;
        shard.owner = party.party_id;
        const std::uint64_t folds = read_u64(in);
        shard.folds.reserve(folds);
        for (std::uint64_t f = 0; f < folds; ++f) shard.folds.push_back(read_batch(in));
        data.parties.push_back(std::move(party));
        data.shards.push_back(std::move(shard));
    }
    return data;
}

}  // namespace fedsim

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedsim/fv.hpp"
#include "fedsim/model.hpp"
#include "fedsim/params.hpp"

namespace fedsim {

// Step LR: eta(r) = base * decay_factor^(number of decay_rounds <= r).
// Rounds are zero-indexed; decay_rounds must be strictly increasing.
struct LrSchedule {
    double base = 0.1;
    double decay_factor = 0.1;
    std::vector<int> decay_rounds;

    double eta(int round) const;
    void validate() const;
};

struct HyperParams {
    int rounds = 200;
    int local_steps = 50;  // K
    double beta = 0.9;
    LrSchedule lr;
    int batch_size = 32;

    void validate() const;
};

// Position within a party's private batch sequence; (epoch, pos) fully
// determines the next batch given the stream seed.
struct BatchCursor {
    std::uint64_t epoch = 0;
    std::size_t pos = 0;
};

// Deterministic shuffled mini-batch schedule. Each epoch's permutation is
// derived from (seed, epoch); incomplete trailing batches are dropped unless
// the whole set is smaller than one batch.
class BatchStream {
public:
    BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed);

    std::size_t num_batches() const { return num_batches_; }
    std::size_t batch_len() const { return batch_len_; }

    // Indices of the cursor's batch; advances the cursor.
    std::vector<std::size_t> next_indices(BatchCursor& cursor) const;

private:
    std::size_t n_;
    std::size_t batch_len_;
    std::size_t num_batches_;
    std::uint64_t seed_;
    mutable bool cache_valid_ = false;
    mutable std::uint64_t cached_epoch_ = 0;
    mutable std::vector<std::size_t> cached_perm_;
};

Batch gather_batch(const Batch& data, std::span<const std::size_t> indices);

// A party's private training state. omega and m_omega never leave the party;
// theta is replaced by the server backbone at the start of every round.
struct TrainerState {
    int party_id = 0;
    ParamVec theta;
    ParamVec omega;
    ParamVec m_omega;
    BatchCursor cursor;
};

struct ServerState {
    ParamVec global_theta;
    ParamVec global_momentum;
    Weighting w = Weighting::uniform(1);
    int round = 0;
};

// kFedAvg runs the identical update path with the momentum factor forced to
// zero, for both the backbone and the classifier.
enum class LocalMode { kFedAvg, kPfm };

// Classical momentum on the private classifier: m <- beta*m + grad,
// omega <- omega - eta*m.
void classifier_step(double beta, double eta, const ParamVec& grad, ParamVec& m_omega,
                     ParamVec& omega);

// One local backbone step with the stale-global-momentum correction spread
// over local_steps: theta - eta*(grad + beta/K * global_momentum). With
// beta == 0 the correction term is skipped on the exact plain-SGD path.
ParamVec backbone_step_pfm(double beta, double eta, int local_steps, const ParamVec& grad,
                           const ParamVec& global_momentum, const ParamVec& theta);

struct LocalRoundResult {
    TrainerState state;
    std::vector<double> step_losses;
};

// K local steps from the server backbone. The starting state supplies the
// private head, its momentum, and the batch cursor; eta is this round's rate.
LocalRoundResult run_local_round(const BackboneSpec& b_spec, const HeadSpec& h_spec,
                                 const Batch& train, const TrainerState& start,
                                 const ParamVec& global_theta, const ParamVec& global_momentum,
                                 LocalMode mode, const HyperParams& hyper, double eta,
                                 std::uint64_t stream_seed);

// Weighted aggregation of local backbones plus the momentum recovery
// M = (theta_old - theta_new)/eta. Advances the round counter and returns
// the equivalent global gradient G = M - beta*M_old. Throws DivergenceError
// if the recovered momentum is non-finite.
ParamVec aggregate_and_update_momentum(ServerState& server, std::span<const ParamVec> thetas,
                                       double beta, double eta);

// Full resumable simulation state. config_json preserves the experiment
// configuration so downstream tools need no side channel.
struct Checkpoint {
    std::string config_json;
    ServerState server;
    std::vector<TrainerState> trainers;
    std::vector<MovingStats> validator_stats;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fedsim

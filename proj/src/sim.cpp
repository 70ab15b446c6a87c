#include "fedsim/sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iterator>
#include <stdexcept>

#include "fedsim/errors.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr double kLossSmoothing = 0.99;

// Sub-stream tags under seeds.fv; seeds.init uses 0 for the backbone and
// 1 + party for heads (the centralized union head shares party 0's stream).
constexpr std::uint64_t kTagValidatorPairs = 0x50A1;
constexpr std::uint64_t kTagCandidates = 0xCA2D;
constexpr std::uint64_t kTagEvalPairs = 0xE7A1;

std::string party_name(int i) { return "party" + std::to_string(i); }

struct EmaTracker {
    double value = 0.0;
    bool started = false;

    void update(double loss) {
        value = started ? kLossSmoothing * value + (1.0 - kLossSmoothing) * loss : loss;
        started = true;
    }
};

Batch pool_parties(const std::vector<PartyData>& parties) {
    std::size_t rows = 0;
    const std::size_t cols = parties.at(0).train.inputs.cols;
    for (const PartyData& p : parties) rows += p.train.size();
    Batch pooled;
    pooled.inputs = Matrix(rows, cols);
    pooled.labels.reserve(rows);
    std::size_t r = 0;
    for (const PartyData& p : parties) {
        for (std::size_t i = 0; i < p.train.size(); ++i, ++r) {
            std::copy(p.train.inputs.row(i), p.train.inputs.row(i) + cols, pooled.inputs.row(r));
            pooled.labels.push_back(p.train.labels[i] + p.global_class_offset);
        }
    }
    return pooled;
}

std::vector<VerificationPairs> make_eval_pairs(const ExperimentConfig& config,
                                               const GeneratedData& data) {
    std::vector<VerificationPairs> pairs;
    pairs.reserve(data.shards.size());
    for (std::size_t s = 0; s < data.shards.size(); ++s) {
        Rng rng(derive_seed(config.seeds.fv, kTagEvalPairs, s));
        pairs.push_back(make_verification_pairs(data.shards[s], rng));
    }
    return pairs;
}

std::vector<double> eval_final_scores(const ExperimentConfig& config, const GeneratedData& data,
                                      const ParamVec& theta) {
    const std::vector<VerificationPairs> pairs = make_eval_pairs(config, data);
    std::vector<double> scores(data.shards.size(), 0.0);
    for (std::size_t s = 0; s < data.shards.size(); ++s)
        scores[s] = score_verification_pairs(config.backbone, theta, data.shards[s], pairs[s]);
    return scores;
}

RunResult run_centralized(const ExperimentConfig& config, const GeneratedData& data,
                          const RoundObserver& observer) {
    const HyperParams& hyper = config.hyper;
    const Batch pooled = pool_parties(data.parties);
    const HeadSpec head = config.head_for(config.data.total_classes());

    Rng backbone_rng(derive_seed(config.seeds.init, 0));
    Rng head_rng(derive_seed(config.seeds.init, 1));
    TrainerState trainer;
    trainer.theta = init_backbone(config.backbone, backbone_rng);
    trainer.omega = init_head(head, head_rng);
    trainer.m_omega = ParamVec::zeros(trainer.omega.size());
    ParamVec m_backbone = ParamVec::zeros(trainer.theta.size());

    const BatchStream stream(pooled.size(), static_cast<std::size_t>(hyper.batch_size),
                             derive_seed(config.seeds.batching, 0));

    RunResult result;
    EmaTracker ema;
    for (int r = 0; r < hyper.rounds; ++r) {
        const auto tick = std::chrono::steady_clock::now();
        const double eta = hyper.lr.eta(r);
        try {
            for (int k = 0; k < hyper.local_steps; ++k) {
                const Batch batch = gather_batch(pooled, stream.next_indices(trainer.cursor));
                const LossGrads lg =
                    loss_and_grads(config.backbone, head, trainer.theta, trainer.omega, batch);
                classifier_step(hyper.beta, eta, lg.head_grad, trainer.m_omega, trainer.omega);
                classifier_step(hyper.beta, eta, lg.backbone_grad, m_backbone, trainer.theta);
                ema.update(lg.loss);
            }
        } catch (const DivergenceError& e) {
            throw DivergenceError("round " + std::to_string(r) + ": " + e.what());
        }

        ServerState server;
        server.global_theta = trainer.theta;
        server.global_momentum = m_backbone;
        server.round = r + 1;
        if (observer) observer(server, {trainer}, eta);

        RoundMetrics m;
        m.round = r;
        m.party_loss = {ema.value};
        m.weighting = {1.0};
        m.eta = eta;
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - tick)
                             .count();
        result.metrics.push_back(std::move(m));

        if (config.checkpoint_every > 0 && (r + 1) % config.checkpoint_every == 0 &&
            r + 1 < hyper.rounds) {
            result.periodic_checkpoints.emplace_back(
                r + 1, Checkpoint{to_json(config), server, {trainer}, {}});
        }
    }

    result.final_scores = eval_final_scores(config, data, trainer.theta);
    double mean = 0.0;
    for (double s : result.final_scores) mean += s;
    mean /= static_cast<double>(result.final_scores.size());
    result.metrics.back().scores = {mean};

    ServerState server;
    server.global_theta = trainer.theta;
    server.global_momentum = m_backbone;
    server.round = hyper.rounds;
    result.final_checkpoint = Checkpoint{to_json(config), server, {trainer}, {}};
    return result;
}

RunResult run_federated(const ExperimentConfig& config, const GeneratedData& data, int threads,
                        const RoundObserver& observer) {
    const HyperParams& hyper = config.hyper;
    const int num_parties = config.data.num_parties;
    const LocalMode mode =
        config.method == Method::kPfm || config.method == Method::kPfmFv ? LocalMode::kPfm
                                                                         : LocalMode::kFedAvg;

    RunResult result;

    Rng backbone_rng(derive_seed(config.seeds.init, 0));
    ServerState server;
    server.global_theta = init_backbone(config.backbone, backbone_rng);
    server.global_momentum = ParamVec::zeros(server.global_theta.size());

    std::vector<HeadSpec> heads;
    std::vector<TrainerState> trainers(num_parties);
    for (int i = 0; i < num_parties; ++i) {
        heads.push_back(config.head_for(config.data.classes_per_party[i]));
        Rng head_rng(derive_seed(config.seeds.init, 1 + static_cast<std::uint64_t>(i)));
        trainers[i].party_id = i;
        trainers[i].theta = server.global_theta;
        trainers[i].omega = init_head(heads[i], head_rng);
        trainers[i].m_omega = ParamVec::zeros(trainers[i].omega.size());
    }

    if (config.initial_weighting == InitialWeighting::kSizeProportional) {
        std::vector<double> sizes(num_parties);
        for (int i = 0; i < num_parties; ++i) {
            sizes[i] = static_cast<double>(data.parties[i].train.size());
            result.events.emit("weighting", party_name(i), "server", 0, 1);
        }
        server.w = Weighting::proportional(sizes);
    } else {
        server.w = Weighting::uniform(static_cast<std::size_t>(num_parties));
    }

    std::vector<ValidatorState> validators;
    Rng fv_rng(derive_seed(config.seeds.fv, kTagCandidates));
    if (config.fv_enabled()) {
        for (int i = 0; i < num_parties; ++i) {
            ValidatorState v;
            v.validator_id = i;
            v.kind = config.validator;
            v.backbone = config.backbone;
            v.head = heads[i];
            v.shard = data.shards[i];
            Rng pair_rng(derive_seed(config.seeds.fv, kTagValidatorPairs, i));
            v.pairs = make_verification_pairs(v.shard, pair_rng);
            validators.push_back(std::move(v));
        }
    }

    std::vector<EmaTracker> ema(num_parties);
    for (int r = 0; r < hyper.rounds; ++r) {
        const auto tick = std::chrono::steady_clock::now();
        const double eta = hyper.lr.eta(r);

        for (int i = 0; i < num_parties; ++i) {
            result.events.emit("backbone", "server", party_name(i), r,
                               server.global_theta.size());
            if (mode == LocalMode::kPfm)
                result.events.emit("momentum", "server", party_name(i), r,
                                   server.global_momentum.size());
        }

        std::vector<LocalRoundResult> locals(num_parties);
        try {
            parallel_for(num_parties, threads, [&](std::size_t i) {
                locals[i] = run_local_round(
                    config.backbone, heads[i], data.parties[i].train, trainers[i],
                    server.global_theta, server.global_momentum, mode, hyper, eta,
                    derive_seed(config.seeds.batching, i));
            });
        } catch (const DivergenceError& e) {
            throw DivergenceError("round " + std::to_string(r) + ": " + e.what());
        }

        std::vector<ParamVec> thetas;
        thetas.reserve(num_parties);
        for (int i = 0; i < num_parties; ++i) {
            trainers[i] = std::move(locals[i].state);
            for (double loss : locals[i].step_losses) ema[i].update(loss);
            thetas.push_back(trainers[i].theta);
            result.events.emit("backbone", party_name(i), "server", r, trainers[i].theta.size());
        }

        const Weighting w_used = server.w;
        try {
            aggregate_and_update_momentum(server, thetas,
                                          mode == LocalMode::kPfm ? hyper.beta : 0.0, eta);
        } catch (const DivergenceError& e) {
            throw DivergenceError("round " + std::to_string(r) + ": " + e.what());
        }

        if (observer) observer(server, trainers, eta);

        RoundMetrics m;
        m.round = r;
        for (int i = 0; i < num_parties; ++i) m.party_loss.push_back(ema[i].value);
        m.weighting = w_used.values();
        m.eta = eta;

        if (config.fv_enabled() && r % config.fv.fv_every == 0) {
            for (int i = 0; i < num_parties; ++i) {
                if (config.validator == ScoreKind::kAccuracy)
                    validators[i].omega_ref = trainers[i].omega;
                for (int t = 0; t < config.fv.candidates_per_round; ++t) {
                    result.events.emit("candidate_backbone", "server", party_name(i), r,
                                       server.global_theta.size());
                    result.events.emit("score", party_name(i), "server", r, 1);
                }
            }
            std::vector<std::uint64_t> sums;
            for (const ParamVec& t : thetas) sums.push_back(checksum(t));
            FvRoundResult fv =
                fv_round(thetas, server.w, validators, config.fv, fv_rng, threads);
            for (std::size_t i = 0; i < thetas.size(); ++i) {
                if (checksum(thetas[i]) != sums[i])
                    throw std::logic_error("weighting search mutated the backbone snapshot");
            }
            if (!fv.skipped) server.w = fv.w;

            FvTraceRecord trace;
            trace.round = r;
            trace.skipped = fv.skipped;
            trace.chosen = fv.chosen;
            trace.candidates = std::move(fv.candidates);
            trace.raw = std::move(fv.raw);
            trace.normalized = std::move(fv.normalized);
            trace.w_after = server.w.values();
            result.fv_trace.push_back(std::move(trace));
        }

        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
        result.metrics.push_back(std::move(m));

        if (config.checkpoint_every > 0 && (r + 1) % config.checkpoint_every == 0 &&
            r + 1 < hyper.rounds) {
            std::vector<MovingStats> stats;
            for (const ValidatorState& v : validators) stats.push_back(v.stats);
            result.periodic_checkpoints.emplace_back(
                r + 1, Checkpoint{to_json(config), server, trainers, std::move(stats)});
        }
    }

    result.final_scores = eval_final_scores(config, data, server.global_theta);
    result.metrics.back().scores = result.final_scores;

    std::vector<MovingStats> stats;
    for (const ValidatorState& v : validators) stats.push_back(v.stats);
    result.final_checkpoint = Checkpoint{to_json(config), server, trainers, std::move(stats)};
    return result;
}

}  // namespace

std::string format_event(const Event& e) {
    return "kind=" + e.kind + " src=" + e.src + " dst=" + e.dst +
           " round=" + std::to_string(e.round) + " count=" + std::to_string(e.count);
}

RunResult run(const ExperimentConfig& config, int threads, const RoundObserver& observer) {
    config.validate();
    if (threads < 1) throw std::invalid_argument("run: threads must be positive");
    PartitionPlan plan = config.data;
    plan.seed = config.seeds.data;
    const GeneratedData data = generate(plan);
    if (config.method == Method::kCentralized)
        return run_centralized(config, data, observer);
    return run_federated(config, data, threads, observer);
}

CompareResult compare(const ExperimentConfig& config, int threads) {
    const Method methods[] = {Method::kCentralized, Method::kFedAvg, Method::kFedAvgFv,
                              Method::kPfm, Method::kPfmFv};
    std::vector<std::vector<double>> scores;
    for (Method m : methods) {
        ExperimentConfig arm = config;
        arm.method = m;
        scores.push_back(run(arm, threads).final_scores);
    }
    CompareResult result;
    const std::vector<double>& baseline = scores[0];
    for (std::size_t m = 0; m < std::size(methods); ++m) {
        for (std::size_t s = 0; s < scores[m].size(); ++s) {
            result.entries.push_back({methods[m], static_cast<int>(s), scores[m][s],
                                      scores[m][s] - baseline[s]});
        }
    }
    return result;
}

}  // namespace fedsim

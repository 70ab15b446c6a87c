#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/fed_core.hpp"
#include "fedsim/fv.hpp"

namespace fedsim {

struct RoundMetrics {
    int round = 0;
    std::vector<double> party_loss;  // training loss, 0.99-smoothed per step
    std::vector<double> weighting;   // w in effect at this round's aggregation
    double eta = 0.0;
    double wall_seconds = 0.0;       // in-memory diagnostics; never serialized
    std::vector<double> scores;      // per party; empty except the final round
};

struct FvTraceRecord {
    int round = 0;
    bool skipped = false;
    std::size_t chosen = 0;
    std::vector<Weighting> candidates;
    ScoreMatrix raw;
    ScoreMatrix normalized;
    std::vector<double> w_after;
};

// One boundary crossing between actors. The simulator routes every exchange
// of state through here, so the log is a complete audit of what left a party.
struct Event {
    std::string kind;  // backbone | momentum | candidate_backbone | score | weighting
    std::string src;
    std::string dst;
    int round = 0;
    std::size_t count = 0;  // payload element count
};

struct EventLog {
    std::vector<Event> events;

    void emit(std::string kind, std::string src, std::string dst, int round, std::size_t count) {
        events.push_back({std::move(kind), std::move(src), std::move(dst), round, count});
    }
};

std::string format_event(const Event& e);

struct RunResult {
    Checkpoint final_checkpoint;
    std::vector<RoundMetrics> metrics;
    std::vector<FvTraceRecord> fv_trace;
    EventLog events;
    std::vector<double> final_scores;  // verification score per validation shard
    std::vector<std::pair<int, Checkpoint>> periodic_checkpoints;
};

// Called after every aggregation with the post-round server state, the local
// trainer states of that round, and the learning rate that was applied.
using RoundObserver = std::function<void(const ServerState& server,
                                         const std::vector<TrainerState>& trainers, double eta)>;

// Executes config.method for config.hyper.rounds rounds. Deterministic for a
// fixed config, independent of the worker count.
RunResult run(const ExperimentConfig& config, int threads = 1,
              const RoundObserver& observer = {});

struct CompareEntry {
    Method method = Method::kCentralized;
    int shard = 0;
    double score = 0.0;
    double delta = 0.0;  // score minus the centralized baseline on this shard
};

struct CompareResult {
    std::vector<CompareEntry> entries;  // method-major, shard-minor
};

// Runs all five methods on identical seeds and data, scoring each final
// backbone on every party's validation shard with shared pair sets.
CompareResult compare(const ExperimentConfig& config, int threads = 1);

}  // namespace fedsim

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Point on the probability simplex: one non-negative share per trainer,
// summing to 1. Construction renormalizes so the sum holds to 1e-12.
class Weighting {
public:
    explicit Weighting(std::vector<double> w);

    static Weighting uniform(std::size_t n);
    static Weighting one_hot(std::size_t n, std::size_t index);
    static Weighting proportional(std::span<const double> sizes);

    std::size_t size() const { return w_.size(); }
    double operator[](std::size_t i) const { return w_[i]; }
    const std::vector<double>& values() const { return w_; }
    std::span<const double> span() const { return w_; }

    bool operator==(const Weighting& other) const { return w_ == other.w_; }

private:
    std::vector<double> w_;
};

// Row = validator, column = candidate step.
struct ScoreMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    static ScoreMatrix zeros(std::size_t r, std::size_t c);
    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::vector<double> column_sums() const;
};

// Exponentially tracked per-validator score statistics for Moving Norm.
// The first observed round bootstraps mu/nu from that round alone.
struct MovingStats {
    double mu = 0.0;
    double nu = 0.0;
    bool initialized = false;
};

enum class NormStrategy { kLocal, kMoving, kNone };

struct FvParams {
    int candidates_per_round = 3;  // T
    double epsilon = 0.001;
    double smooth_rate = 0.01;     // phi
    double moving_rate = 0.01;     // gamma
    NormStrategy norm = NormStrategy::kLocal;
    int fv_every = 1;              // training rounds between FV rounds
    std::uint64_t seed = 3;

    void validate() const;
};

// Uniform sample from the (n-1)-simplex via normalized exponential draws.
Weighting sample_simplex(Rng& rng, std::size_t n);

// --- validator scoring ----------------------------------------------------

// Fixed same/different-class index pairs per fold, sampled once so candidate
// models are compared on identical pair sets.
struct VerificationPairs {
    struct Pair {
        std::uint32_t a = 0;
        std::uint32_t b = 0;
        bool same = false;
    };
    std::vector<std::vector<Pair>> folds;
};

// Builds balanced pair lists (all same-class pairs up to the cap, equally
// many different-class pairs). Throws if a fold cannot form both kinds.
VerificationPairs make_verification_pairs(const ValidationShard& shard, Rng& rng,
                                          std::size_t max_pairs_per_fold = 512);

// Verification score: cosine-similarity pair classification where each fold
// is scored with the accept threshold selected on the remaining folds;
// returns the mean fold accuracy in [0, 1].
double score_verification_pairs(const BackboneSpec& spec, const ParamVec& theta,
                                const ValidationShard& shard, const VerificationPairs& pairs);

// Convenience wrapper that samples pairs from rng and scores in one shot.
double score_verification(const BackboneSpec& spec, const ParamVec& theta,
                          const ValidationShard& shard, Rng& rng);

// Top-1 classification accuracy of (theta, omega_ref) over the whole shard.
double score_accuracy(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                      const ParamVec& omega_ref, const ValidationShard& shard);

// --- score normalization ----------------------------------------------------

// Divides each row by sqrt(population variance + epsilon).
ScoreMatrix normalize_local(const ScoreMatrix& scores, double epsilon);

// Divides each row by the moving standard deviation tracked in stats;
// returns the rescaled matrix and the updated statistics.
std::pair<ScoreMatrix, std::vector<MovingStats>> normalize_moving(
    const ScoreMatrix& scores, const std::vector<MovingStats>& stats, double gamma, double epsilon);

// Argmax candidate by summed normalized score (ties break to the lowest
// index, favoring the incumbent weighting), smoothed into w by phi.
Weighting select_and_smooth(const ScoreMatrix& normalized,
                            const std::vector<Weighting>& candidates, const Weighting& w,
                            double phi);

// --- FV round ---------------------------------------------------------------

enum class ScoreKind { kVerification, kAccuracy };

// A party's private validation side: shard, scoring mode, fixed verification
// pairs, and Moving Norm statistics.
struct ValidatorState {
    int validator_id = 0;
    ScoreKind kind = ScoreKind::kVerification;
    BackboneSpec backbone;
    HeadSpec head;
    ParamVec omega_ref;  // used by accuracy scoring only
    ValidationShard shard;
    VerificationPairs pairs;
    MovingStats stats;

    double score(const ParamVec& theta_hat) const;
};

using ScoreFn = std::function<double(const ParamVec&)>;

struct FvRoundResult {
    Weighting w;                       // weighting to apply
    std::vector<Weighting> candidates;
    ScoreMatrix raw;
    ScoreMatrix normalized;
    std::size_t chosen = 0;
    bool skipped = false;              // a validator failed; w is unchanged
};

// One search round over a frozen snapshot of local backbones: candidate 1 is
// the incumbent weighting, the rest are sampled; every candidate aggregate is
// scored by every validator, scores are normalized, and the best candidate is
// smoothed into w. A scorer failure leaves w unchanged for the round.
FvRoundResult fv_round(std::span<const ParamVec> snapshot, const Weighting& w,
                       std::span<const ScoreFn> scorers, std::span<MovingStats> stats,
                       const FvParams& params, Rng& rng, int threads = 1);

// ValidatorState overload; updates each validator's MovingStats in moving mode.
FvRoundResult fv_round(std::span<const ParamVec> snapshot, const Weighting& w,
                       std::vector<ValidatorState>& validators, const FvParams& params, Rng& rng,
                       int threads = 1);

// --- exhaustive search ------------------------------------------------------

struct GridPoint {
    Weighting w;
    std::vector<double> scores;  // raw, one per validator
};

// Evaluates every lattice point of the 2-simplex at the given resolution
// (requires exactly 3 snapshots); scores are raw, without normalizing.
std::vector<GridPoint> grid_search(std::span<const ParamVec> snapshot,
                                   std::span<const ScoreFn> scorers, int resolution,
                                   int threads = 1);

const char* to_string(NormStrategy n);
const char* to_string(ScoreKind k);

}  // namespace fedsim

#include "fedsim/fv.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "fedsim/errors.hpp"
#include "fedsim/parallel.hpp"

namespace fedsim {

namespace {

constexpr double kNormFloor = 1e-12;

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

std::size_t argmax_column_sum(const ScoreMatrix& m) {
    const std::vector<double> sums = m.column_sums();
    std::size_t best = 0;
    for (std::size_t t = 1; t < sums.size(); ++t) {
        if (sums[t] > sums[best]) best = t;
    }
    return best;
}

}  // namespace

Weighting::Weighting(std::vector<double> w) : w_(std::move(w)) {
    if (w_.empty()) throw std::invalid_argument("Weighting: must not be empty");
    double sum = 0.0;
    for (double v : w_) {
        if (!std::isfinite(v) || v < 0.0)
            throw std::invalid_argument("Weighting: entries must be finite and non-negative");
        sum += v;
    }
    if (sum <= 0.0) throw std::invalid_argument("Weighting: entries must not all be zero");
    for (double& v : w_) v /= sum;
}

Weighting Weighting::uniform(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Weighting::uniform: n must be positive");
    return Weighting(std::vector<double>(n, 1.0));
}

Weighting Weighting::one_hot(std::size_t n, std::size_t index) {
    if (index >= n) throw std::invalid_argument("Weighting::one_hot: index out of range");
    std::vector<double> w(n, 0.0);
    w[index] = 1.0;
    return Weighting(std::move(w));
}

Weighting Weighting::proportional(std::span<const double> sizes) {
    return Weighting(std::vector<double>(sizes.begin(), sizes.end()));
}

ScoreMatrix ScoreMatrix::zeros(std::size_t r, std::size_t c) {
    ScoreMatrix m;
    m.rows = r;
    m.cols = c;
    m.data.assign(r * c, 0.0);
    return m;
}

std::vector<double> ScoreMatrix::column_sums() const {
    std::vector<double> sums(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) sums[c] += at(r, c);
    return sums;
}

void FvParams::validate() const {
    if (candidates_per_round < 1)
        throw std::invalid_argument("FvParams: candidates_per_round must be positive");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw std::invalid_argument("FvParams: epsilon must be positive");
    if (!(smooth_rate > 0.0) || smooth_rate > 1.0)
        throw std::invalid_argument("FvParams: smooth_rate must be in (0, 1]");
    if (!(moving_rate > 0.0) || moving_rate > 1.0)
        throw std::invalid_argument("FvParams: moving_rate must be in (0, 1]");
    if (fv_every < 1) throw std::invalid_argument("FvParams: fv_every must be positive");
}

Weighting sample_simplex(Rng& rng, std::size_t n) {
    if (n == 0) throw std::invalid_argument("sample_simplex: n must be positive");
    if (n == 1) return Weighting({1.0});
    for (;;) {
        std::vector<double> draws(n);
        double sum = 0.0;
        for (double& d : draws) {
            d = rng.exponential();
            sum += d;
        }
        if (sum > 0.0) return Weighting(std::move(draws));
    }
}

VerificationPairs make_verification_pairs(const ValidationShard& shard, Rng& rng,
                                          std::size_t max_pairs_per_fold) {
    if (max_pairs_per_fold < 2)
        throw std::invalid_argument("make_verification_pairs: cap must allow one pair of each kind");
    VerificationPairs out;
    out.folds.reserve(shard.folds.size());
    for (const Batch& fold : shard.folds) {
        std::vector<VerificationPairs::Pair> same;
        std::vector<VerificationPairs::Pair> diff;
        const std::size_t n = fold.size();
        for (std::size_t a = 0; a + 1 < n; ++a) {
            for (std::size_t b = a + 1; b < n; ++b) {
                auto& bucket = fold.labels[a] == fold.labels[b] ? same : diff;
                bucket.push_back({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b),
                                  fold.labels[a] == fold.labels[b]});
            }
        }
        if (same.empty() || diff.empty())
            throw std::invalid_argument(
                "make_verification_pairs: fold lacks same- or different-class pairs");
        rng.shuffle(same);
        rng.shuffle(diff);
        const std::size_t n_each = std::min({same.size(), diff.size(), max_pairs_per_fold / 2});
        std::vector<VerificationPairs::Pair> pairs(same.begin(), same.begin() + n_each);
        pairs.insert(pairs.end(), diff.begin(), diff.begin() + n_each);
        out.folds.push_back(std::move(pairs));
    }
    return out;
}

namespace {

struct ScoredPair {
    double cos = 0.0;
    bool same = false;
};

// Accept threshold maximizing accuracy of the rule "same iff cos >= t" over
// train; ties resolve to the lowest threshold. Empty train falls back to 0.
double best_threshold(std::vector<ScoredPair> train) {
    if (train.empty()) return 0.0;
    std::sort(train.begin(), train.end(),
              [](const ScoredPair& a, const ScoredPair& b) { return a.cos < b.cos; });
    const std::size_t n = train.size();
    std::size_t total_same = 0;
    for (const ScoredPair& p : train) total_same += p.same ? 1 : 0;
    std::size_t same_below = 0;
    std::size_t diff_below = 0;
    std::size_t best_correct = 0;
    double best_t = train.back().cos + 1.0;  // candidate "accept nothing"
    // Candidate t = cos[k] predicts same for every pair at or above position
    // k; valid only at the first occurrence of each distinct value.
    for (std::size_t k = 0; k <= n; ++k) {
        const bool distinct = k == 0 || k == n || train[k].cos != train[k - 1].cos;
        if (distinct) {
            const std::size_t correct = (total_same - same_below) + diff_below;
            const double t = k < n ? train[k].cos : train.back().cos + 1.0;
            if (correct > best_correct) {
                best_correct = correct;
                best_t = t;
            }
        }
        if (k < n) {
            same_below += train[k].same ? 1 : 0;
            diff_below += train[k].same ? 0 : 1;
        }
    }
    return best_t;
}

}  // namespace

double score_verification_pairs(const BackboneSpec& spec, const ParamVec& theta,
                                const ValidationShard& shard, const VerificationPairs& pairs) {
    if (pairs.folds.size() != shard.folds.size())
        throw std::invalid_argument("score_verification_pairs: fold count mismatch");
    const std::size_t num_folds = shard.folds.size();

    // Cosine similarity for every pair, grouped by fold.
    std::vector<std::vector<ScoredPair>> scored(num_folds);
    for (std::size_t f = 0; f < num_folds; ++f) {
        const Batch& fold = shard.folds[f];
        const Matrix feats = forward_features(spec, theta, fold.inputs);
        std::vector<double> norms(feats.rows);
        for (std::size_t r = 0; r < feats.rows; ++r)
            norms[r] = std::max(std::sqrt(dot(feats.row(r), feats.row(r), feats.cols)), kNormFloor);
        scored[f].reserve(pairs.folds[f].size());
        for (const auto& p : pairs.folds[f]) {
            if (p.a >= feats.rows || p.b >= feats.rows)
                throw std::invalid_argument("score_verification_pairs: pair index out of range");
            const double cos =
                dot(feats.row(p.a), feats.row(p.b), feats.cols) / (norms[p.a] * norms[p.b]);
            scored[f].push_back({cos, p.same});
        }
    }

    double fold_acc_sum = 0.0;
    std::size_t folds_counted = 0;
    for (std::size_t e = 0; e < num_folds; ++e) {
        if (scored[e].empty()) continue;
        std::vector<ScoredPair> train;
        for (std::size_t f = 0; f < num_folds; ++f) {
            if (f == e) continue;
            train.insert(train.end(), scored[f].begin(), scored[f].end());
        }
        const double t = best_threshold(std::move(train));
        std::size_t correct = 0;
        for (const ScoredPair& p : scored[e])
            if ((p.cos >= t) == p.same) ++correct;
        fold_acc_sum += static_cast<double>(correct) / static_cast<double>(scored[e].size());
        ++folds_counted;
    }
    if (folds_counted == 0)
        throw std::invalid_argument("score_verification_pairs: no scorable folds");
    return fold_acc_sum / static_cast<double>(folds_counted);
}

double score_verification(const BackboneSpec& spec, const ParamVec& theta,
                          const ValidationShard& shard, Rng& rng) {
    const VerificationPairs pairs = make_verification_pairs(shard, rng);
    return score_verification_pairs(spec, theta, shard, pairs);
}

double score_accuracy(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                      const ParamVec& omega_ref, const ValidationShard& shard) {
    if (omega_ref.size() != h_spec.param_count())
        throw std::invalid_argument("score_accuracy: omega length mismatch");
    const std::size_t dim = static_cast<std::size_t>(h_spec.feature_dim);
    const std::size_t classes = static_cast<std::size_t>(h_spec.num_classes);
    const double* w = omega_ref.span().data();

    std::vector<double> class_norms(classes, 1.0);
    if (h_spec.loss == HeadLoss::kCosineMargin) {
        for (std::size_t c = 0; c < classes; ++c)
            class_norms[c] = std::max(std::sqrt(dot(w + c * dim, w + c * dim, dim)), kNormFloor);
    }

    std::size_t correct = 0;
    std::size_t total = 0;
    for (const Batch& fold : shard.folds) {
        const Matrix feats = forward_features(b_spec, theta, fold.inputs);
        for (std::size_t r = 0; r < feats.rows; ++r) {
            const double* x = feats.row(r);
            double x_norm = 1.0;
            if (h_spec.loss == HeadLoss::kCosineMargin)
                x_norm = std::max(std::sqrt(dot(x, x, dim)), kNormFloor);
            std::size_t best = 0;
            double best_logit = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                // Margin and scale are train-time shaping; ranking at eval
                // uses the plain dot product or cosine.
                const double logit = dot(w + c * dim, x, dim) / (class_norms[c] * x_norm);
                if (c == 0 || logit > best_logit) {
                    best = c;
                    best_logit = logit;
                }
            }
            if (static_cast<int>(best) == fold.labels[r]) ++correct;
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("score_accuracy: empty shard");
    return static_cast<double>(correct) / static_cast<double>(total);
}

ScoreMatrix normalize_local(const ScoreMatrix& scores, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("normalize_local: epsilon must be positive");
    if (scores.cols == 0) throw std::invalid_argument("normalize_local: empty matrix");
    ScoreMatrix out = scores;
    for (std::size_t r = 0; r < scores.rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < scores.cols; ++c) mean += scores.at(r, c);
        mean /= static_cast<double>(scores.cols);
        double var = 0.0;
        for (std::size_t c = 0; c < scores.cols; ++c) {
            const double d = scores.at(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(scores.cols);
        const double denom = std::sqrt(var + epsilon);
        for (std::size_t c = 0; c < scores.cols; ++c) out.at(r, c) = scores.at(r, c) / denom;
    }
    return out;
}

std::pair<ScoreMatrix, std::vector<MovingStats>> normalize_moving(
    const ScoreMatrix& scores, const std::vector<MovingStats>& stats, double gamma,
    double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("normalize_moving: epsilon must be positive");
    if (!(gamma > 0.0) || gamma > 1.0)
        throw std::invalid_argument("normalize_moving: gamma must be in (0, 1]");
    if (scores.cols == 0) throw std::invalid_argument("normalize_moving: empty matrix");
    if (stats.size() != scores.rows)
        throw std::invalid_argument("normalize_moving: stats row mismatch");
    ScoreMatrix out = scores;
    std::vector<MovingStats> next = stats;
    for (std::size_t r = 0; r < scores.rows; ++r) {
        // A row with no history bootstraps from this round alone.
        const double g = stats[r].initialized ? gamma : 1.0;
        double mean = 0.0;
        for (std::size_t c = 0; c < scores.cols; ++c) mean += scores.at(r, c);
        mean /= static_cast<double>(scores.cols);
        const double mu = (1.0 - g) * stats[r].mu + g * mean;
        double sq = 0.0;
        for (std::size_t c = 0; c < scores.cols; ++c) {
            const double d = scores.at(r, c) - mu;
            sq += d * d;
        }
        sq /= static_cast<double>(scores.cols);
        const double nu = (1.0 - g) * stats[r].nu + g * sq;
        const double denom = std::sqrt(nu + epsilon);
        for (std::size_t c = 0; c < scores.cols; ++c) out.at(r, c) = scores.at(r, c) / denom;
        next[r] = {mu, nu, true};
    }
    return {std::move(out), std::move(next)};
}

Weighting select_and_smooth(const ScoreMatrix& normalized,
                            const std::vector<Weighting>& candidates, const Weighting& w,
                            double phi) {
    if (normalized.cols != candidates.size())
        throw std::invalid_argument("select_and_smooth: candidate count mismatch");
    if (candidates.empty()) throw std::invalid_argument("select_and_smooth: no candidates");
    if (!(phi > 0.0) || phi > 1.0)
        throw std::invalid_argument("select_and_smooth: phi must be in (0, 1]");
    const std::size_t chosen = argmax_column_sum(normalized);
    const Weighting& pick = candidates[chosen];
    if (pick.size() != w.size())
        throw std::invalid_argument("select_and_smooth: weighting length mismatch");
    std::vector<double> blended(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) blended[i] = (1.0 - phi) * w[i] + phi * pick[i];
    return Weighting(std::move(blended));
}

FvRoundResult fv_round(std::span<const ParamVec> snapshot, const Weighting& w,
                       std::span<const ScoreFn> scorers, std::span<MovingStats> stats,
                       const FvParams& params, Rng& rng, int threads) {
    params.validate();
    if (snapshot.empty()) throw std::invalid_argument("fv_round: empty snapshot");
    if (snapshot.size() != w.size())
        throw std::invalid_argument("fv_round: weighting length mismatch");
    if (scorers.empty()) throw std::invalid_argument("fv_round: no validators");
    if (params.norm == NormStrategy::kMoving && stats.size() != scorers.size())
        throw std::invalid_argument("fv_round: stats length mismatch");

    const std::size_t T = static_cast<std::size_t>(params.candidates_per_round);
    FvRoundResult result{w, {}, {}, {}, 0, false};
    result.candidates.reserve(T);
    result.candidates.push_back(w);
    for (std::size_t t = 1; t < T; ++t)
        result.candidates.push_back(sample_simplex(rng, snapshot.size()));

    std::vector<ParamVec> aggregates;
    aggregates.reserve(T);
    for (const Weighting& cand : result.candidates)
        aggregates.push_back(weighted_sum(snapshot, cand.span()));

    result.raw = ScoreMatrix::zeros(scorers.size(), T);
    try {
        parallel_for(scorers.size() * T, threads, [&](std::size_t k) {
            const std::size_t i = k / T;
            const std::size_t t = k % T;
            result.raw.at(i, t) = scorers[i](aggregates[t]);
        });
    } catch (...) {
        // A failed validator invalidates the round; the weighting carries
        // over untouched and no statistics update.
        result.skipped = true;
        return result;
    }

    switch (params.norm) {
        case NormStrategy::kLocal:
            result.normalized = normalize_local(result.raw, params.epsilon);
            break;
        case NormStrategy::kMoving: {
            std::vector<MovingStats> prior(stats.begin(), stats.end());
            auto [normed, next] =
                normalize_moving(result.raw, prior, params.moving_rate, params.epsilon);
            result.normalized = std::move(normed);
            std::copy(next.begin(), next.end(), stats.begin());
            break;
        }
        case NormStrategy::kNone:
            result.normalized = result.raw;
            break;
    }

    result.chosen = argmax_column_sum(result.normalized);
    result.w = select_and_smooth(result.normalized, result.candidates, w, params.smooth_rate);
    return result;
}

double ValidatorState::score(const ParamVec& theta_hat) const {
    switch (kind) {
        case ScoreKind::kVerification:
            return score_verification_pairs(backbone, theta_hat, shard, pairs);
        case ScoreKind::kAccuracy:
            return score_accuracy(backbone, head, theta_hat, omega_ref, shard);
    }
    throw std::invalid_argument("ValidatorState: unknown score kind");
}

FvRoundResult fv_round(std::span<const ParamVec> snapshot, const Weighting& w,
                       std::vector<ValidatorState>& validators, const FvParams& params, Rng& rng,
                       int threads) {
    std::vector<ScoreFn> scorers;
    scorers.reserve(validators.size());
    for (const ValidatorState& v : validators)
        scorers.push_back([&v](const ParamVec& theta) { return v.score(theta); });
    std::vector<MovingStats> stats;
    stats.reserve(validators.size());
    for (const ValidatorState& v : validators) stats.push_back(v.stats);
    FvRoundResult result = fv_round(snapshot, w, scorers, stats, params, rng, threads);
    if (!result.skipped)
        for (std::size_t i = 0; i < validators.size(); ++i) validators[i].stats = stats[i];
    return result;
}

std::vector<GridPoint> grid_search(std::span<const ParamVec> snapshot,
                                   std::span<const ScoreFn> scorers, int resolution, int threads) {
    if (snapshot.size() != 3)
        throw std::invalid_argument("grid_search: requires exactly 3 local backbones");
    if (resolution < 1) throw std::invalid_argument("grid_search: resolution must be positive");
    if (scorers.empty()) throw std::invalid_argument("grid_search: no validators");

    std::vector<GridPoint> points;
    for (int a = 0; a <= resolution; ++a) {
        for (int b = 0; a + b <= resolution; ++b) {
            const int c = resolution - a - b;
            points.push_back({Weighting({static_cast<double>(a), static_cast<double>(b),
                                         static_cast<double>(c)}),
                              std::vector<double>(scorers.size(), 0.0)});
        }
    }
    parallel_for(points.size(), threads, [&](std::size_t p) {
        const ParamVec agg = weighted_sum(snapshot, points[p].w.span());
        for (std::size_t i = 0; i < scorers.size(); ++i) points[p].scores[i] = scorers[i](agg);
    });
    return points;
}

const char* to_string(NormStrategy n) {
    switch (n) {
        case NormStrategy::kLocal: return "local";
        case NormStrategy::kMoving: return "moving";
        case NormStrategy::kNone: return "none";
    }
    return "?";
}

const char* to_string(ScoreKind k) {
    switch (k) {
        case ScoreKind::kVerification: return "verification";
        case ScoreKind::kAccuracy: return "accuracy";
    }
    return "?";
}

}  // namespace fedsim

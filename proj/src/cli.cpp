#include "fedsim/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedsim/config.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr std::uint64_t kTagGridPairs = 0x9D1D;

void apply_seed_override(ExperimentConfig& config, const CliOptions& opts) {
    if (!opts.has_seed_override) return;
    config.seeds.data = derive_seed(opts.seed_override, 1);
    config.seeds.init = derive_seed(opts.seed_override, 2);
    config.seeds.fv = derive_seed(opts.seed_override, 3);
    config.seeds.batching = derive_seed(opts.seed_override, 4);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::string metrics_csv(const RunResult& res) {
    const std::size_t parties = res.metrics.at(0).party_loss.size();
    std::string out = "round,party,loss";
    for (std::size_t i = 0; i < parties; ++i) out += ",w_" + std::to_string(i);
    out += ",score\n";
    for (const RoundMetrics& m : res.metrics) {
        for (std::size_t i = 0; i < parties; ++i) {
            out += std::to_string(m.round) + "," + std::to_string(i) + "," +
                   csv_double(m.party_loss[i]);
            for (double w : m.weighting) out += "," + csv_double(w);
            out += ",";
            if (!m.scores.empty()) out += csv_double(m.scores[i]);
            out += "\n";
        }
    }
    return out;
}

std::string fv_trace_csv(const RunResult& res, int parties, int candidates) {
    std::string out = "round,skipped,chosen";
    for (int t = 0; t < candidates; ++t)
        for (int i = 0; i < parties; ++i)
            out += ",cand" + std::to_string(t) + "_w" + std::to_string(i);
    for (int v = 0; v < parties; ++v)
        for (int t = 0; t < candidates; ++t)
            out += ",raw_v" + std::to_string(v) + "_c" + std::to_string(t);
    for (int v = 0; v < parties; ++v)
        for (int t = 0; t < candidates; ++t)
            out += ",norm_v" + std::to_string(v) + "_c" + std::to_string(t);
    for (int i = 0; i < parties; ++i) out += ",w_" + std::to_string(i);
    out += "\n";

    for (const FvTraceRecord& rec : res.fv_trace) {
        out += std::to_string(rec.round) + "," + (rec.skipped ? "1" : "0") + "," +
               std::to_string(rec.chosen);
        for (int t = 0; t < candidates; ++t)
            for (int i = 0; i < parties; ++i)
                out += "," + csv_double(rec.candidates.at(t)[static_cast<std::size_t>(i)]);
        for (int v = 0; v < parties; ++v)
            for (int t = 0; t < candidates; ++t)
                out += "," + csv_double(rec.raw.at(v, t));
        for (int v = 0; v < parties; ++v)
            for (int t = 0; t < candidates; ++t)
                out += "," + csv_double(rec.normalized.data.empty() ? 0.0
                                                                    : rec.normalized.at(v, t));
        for (double w : rec.w_after) out += "," + csv_double(w);
        out += "\n";
    }
    return out;
}

std::string events_text(const EventLog& log) {
    std::string out;
    for (const Event& e : log.events) out += format_event(e) + "\n";
    return out;
}

const char* kSchemaText =
    "metrics.csv\n"
    "  round: training round index (0-based)\n"
    "  party: party index within the run\n"
    "  loss: party training loss, exponentially smoothed per step (factor 0.99)\n"
    "  w_<i>: aggregation weight of party i in effect at this round\n"
    "  score: verification score on the party's validation shard; empty except\n"
    "         at the final round (centralized runs report the shard mean)\n"
    "\n"
    "fv_trace.csv\n"
    "  round: training round the weighting search ran after\n"
    "  skipped: 1 if a validator failed and the weighting was left unchanged\n"
    "  chosen: selected candidate index (0 = incumbent weighting)\n"
    "  cand<t>_w<i>: weight of party i in candidate t\n"
    "  raw_v<v>_c<t>: validator v's raw score of candidate t\n"
    "  norm_v<v>_c<t>: normalized score (zeros when skipped)\n"
    "  w_<i>: weight of party i after smoothing\n"
    "\n"
    "events.log\n"
    "  kind=<payload> src=<actor> dst=<actor> round=<r> count=<elements>\n"
    "  payload kinds: backbone, momentum, candidate_backbone, score, weighting\n"
    "\n"
    "compare.csv\n"
    "  method,shard,score,delta: final verification score per validation shard\n"
    "  and its difference from the centralized baseline\n"
    "\n"
    "grid_<resolution>.csv\n"
    "  w_0,w_1,w_2: lattice weighting\n"
    "  score_v<i>: validator i's raw score of the aggregate at that weighting\n"
    "  score_mean: mean over validators\n";

std::string checkpoint_name(int round) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint_r%04d.bin", round);
    return buf;
}

}  // namespace

std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string resolve_out_root(const std::string& override_dir, const std::string& config_dir) {
    if (!override_dir.empty()) return override_dir;
    const char* env = std::getenv("FEDSIM_OUT_ROOT");
    if (env && *env) return env;
    return config_dir;
}

int cmd_run(const std::string& config_path, const CliOptions& opts) {
    try {
        ExperimentConfig config = load_config(config_path);
        apply_seed_override(config, opts);
        const std::string out_root = resolve_out_root(opts.out_override, config.output_dir);
        const std::string dir = out_root + "/" + config_hash(config);
        std::filesystem::create_directories(dir);

        const RunResult res = run(config, opts.threads);

        write_text(dir + "/config.json", to_json(config));
        write_text(dir + "/metrics.csv", metrics_csv(res));
        write_text(dir + "/metrics.schema.txt", kSchemaText);
        if (config.fv_enabled())
            write_text(dir + "/fv_trace.csv",
                       fv_trace_csv(res, config.data.num_parties, config.fv.candidates_per_round));
        write_text(dir + "/events.log", events_text(res.events));
        save_checkpoint(res.final_checkpoint, dir + "/checkpoint.bin");
        for (const auto& [round, ckpt] : res.periodic_checkpoints)
            save_checkpoint(ckpt, dir + "/" + checkpoint_name(round));

        std::cout << dir << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_compare(const std::string& config_path, const CliOptions& opts) {
    try {
        ExperimentConfig config = load_config(config_path);
        apply_seed_override(config, opts);
        const std::string out_root = resolve_out_root(opts.out_override, config.output_dir);
        const std::string dir = out_root + "/" + config_hash(config);
        std::filesystem::create_directories(dir);

        const CompareResult res = compare(config, opts.threads);

        std::string csv = "method,shard,score,delta\n";
        std::printf("%-12s %-6s %-22s %s\n", "method", "shard", "score", "delta");
        for (const CompareEntry& e : res.entries) {
            csv += std::string(to_string(e.method)) + "," + std::to_string(e.shard) + "," +
                   csv_double(e.score) + "," + csv_double(e.delta) + "\n";
            std::printf("%-12s %-6d %-22.6f %+.6f\n", to_string(e.method), e.shard, e.score,
                        e.delta);
        }
        write_text(dir + "/compare.csv", csv);
        std::cout << dir << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

std::vector<ScoreFn> scorers_from_checkpoint(const Checkpoint& ckpt) {
    const ExperimentConfig config = parse_config(ckpt.config_json);
    PartitionPlan plan = config.data;
    plan.seed = config.seeds.data;
    const GeneratedData data = generate(plan);
    std::vector<ScoreFn> scorers;
    for (std::size_t i = 0; i < data.shards.size(); ++i) {
        Rng pair_rng(derive_seed(config.seeds.fv, kTagGridPairs, i));
        const VerificationPairs pairs = make_verification_pairs(data.shards[i], pair_rng);
        scorers.push_back([spec = config.backbone, shard = data.shards[i],
                           pairs](const ParamVec& theta) {
            return score_verification_pairs(spec, theta, shard, pairs);
        });
    }
    return scorers;
}

int cmd_gridsearch(const std::string& checkpoint_path, int resolution, const CliOptions& opts) {
    try {
        if (resolution < 2) {
            std::cerr << "config error: resolution must be at least 2\n";
            return 2;
        }
        Checkpoint ckpt;
        try {
            ckpt = load_checkpoint(checkpoint_path);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        if (ckpt.trainers.size() != 3) {
            std::cerr << "config error: checkpoint must contain exactly 3 party backbones, got "
                      << ckpt.trainers.size() << "\n";
            return 2;
        }
        const ExperimentConfig config = parse_config(ckpt.config_json);
        const std::string out_root = resolve_out_root(opts.out_override, config.output_dir);
        const std::string dir = out_root + "/" + config_hash(config);
        std::filesystem::create_directories(dir);

        std::vector<ParamVec> snapshot;
        for (const TrainerState& t : ckpt.trainers) snapshot.push_back(t.theta);
        const std::vector<ScoreFn> scorers = scorers_from_checkpoint(ckpt);
        const std::vector<GridPoint> points =
            grid_search(snapshot, scorers, resolution, opts.threads);

        std::string csv = "w_0,w_1,w_2";
        for (std::size_t v = 0; v < scorers.size(); ++v) csv += ",score_v" + std::to_string(v);
        csv += ",score_mean\n";
        std::size_t best = 0;
        double best_mean = 0.0;
        for (std::size_t p = 0; p < points.size(); ++p) {
            double mean = 0.0;
            csv += csv_double(points[p].w[0]) + "," + csv_double(points[p].w[1]) + "," +
                   csv_double(points[p].w[2]);
            for (double s : points[p].scores) {
                csv += "," + csv_double(s);
                mean += s;
            }
            mean /= static_cast<double>(points[p].scores.size());
            csv += "," + csv_double(mean) + "\n";
            if (p == 0 || mean > best_mean) {
                best = p;
                best_mean = mean;
            }
        }
        const std::string path = dir + "/grid_" + std::to_string(resolution) + ".csv";
        write_text(path, csv);

        std::printf("grid argmax w=(%.4f, %.4f, %.4f) mean score %.6f\n", points[best].w[0],
                    points[best].w[1], points[best].w[2], best_mean);
        std::cout << path << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_gradcheck(const std::string& config_path, int instances, double fd_step, bool perturb,
                  const CliOptions& opts) {
    try {
        const ExperimentConfig config =
            config_path.empty() ? ExperimentConfig{} : load_config(config_path);
        const BackboneSpec& b_spec = config.backbone;
        const HeadSpec h_spec = config.head_for(5);
        const std::uint64_t base = opts.has_seed_override ? opts.seed_override : 42;
        constexpr double kTol = 1e-4;
        constexpr std::size_t kBatch = 8;

        auto make_instance = [&](int inst, ParamVec& theta, ParamVec& omega, Batch& batch) {
            Rng rng(derive_seed(base, static_cast<std::uint64_t>(inst)));
            theta = init_backbone(b_spec, rng);
            omega = init_head(h_spec, rng);
            batch.inputs = Matrix(kBatch, static_cast<std::size_t>(b_spec.input_dim));
            for (double& x : batch.inputs.data) x = rng.normal();
            batch.labels.clear();
            for (std::size_t i = 0; i < kBatch; ++i)
                batch.labels.push_back(
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(h_spec.num_classes))));
        };

        double worst = 0.0;
        for (int inst = 0; inst < instances; ++inst) {
            ParamVec theta, omega;
            Batch batch;
            make_instance(inst, theta, omega, batch);
            double err;
            if (perturb && inst == 0) {
                const LossGrads lg = loss_and_grads(b_spec, h_spec, theta, omega, batch);
                std::vector<double> g = lg.backbone_grad.values();
                g[0] += 1e-3;
                err = gradient_check_against(b_spec, h_spec, theta, omega, batch, fd_step,
                                             ParamVec::from_values(std::move(g)), lg.head_grad);
            } else {
                err = gradient_check(b_spec, h_spec, theta, omega, batch, fd_step);
            }
            std::printf("instance %2d: max relative error %.3e%s\n", inst, err,
                        err < kTol ? "" : "  FAIL");
            worst = std::max(worst, err);
        }

        std::printf("\nfd_step sweep (instance 0):\n");
        for (double h : {1e-3, 1e-4, 1e-5, 1e-6, 1e-7}) {
            ParamVec theta, omega;
            Batch batch;
            make_instance(0, theta, omega, batch);
            std::printf("  h=%.0e  max relative error %.3e\n", h,
                        gradient_check(b_spec, h_spec, theta, omega, batch, h));
        }

        const bool pass = worst < kTol;
        std::printf("\n%s (worst %.3e, tolerance %.0e)\n", pass ? "PASS" : "FAIL", worst, kTol);
        return pass ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fedsim

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/cli.hpp"
#include "fedsim/config.hpp"

using namespace fedsim;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("fedsim_test_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path write_config(const TempDir& dir, const std::string& name, const std::string& text) {
    const fs::path p = dir.path / name;
    std::ofstream out(p);
    out << text;
    return p;
}

std::string check_parse_error(const std::string& text) {
    try {
        parse_config(text);
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

// Config small enough for CLI round trips in a test.
const char* kSmallConfig = R"({
  "method": "pfm_fv",
  "rounds": 4,
  "local_steps": 2,
  "batch_size": 8,
  "lr": {"decay_rounds": [3]},
  "data": {"samples_per_class": 8},
  "backbone": {"hidden_dims": [8], "feature_dim": 8}
})";

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (const char ch : text)
        if (ch == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("an empty document parses to the documented defaults") {
    const ExperimentConfig c = parse_config("{}");
    CHECK(c.method == Method::kPfm);
    CHECK(c.hyper.rounds == 200);
    CHECK(c.hyper.local_steps == 50);
    CHECK(c.hyper.beta == 0.9);
    CHECK(c.hyper.batch_size == 32);
    CHECK(c.hyper.lr.base == 0.1);
    CHECK(c.hyper.lr.decay_rounds == std::vector<int>{80, 140, 184});
    CHECK(c.fv.candidates_per_round == 3);
    CHECK(c.fv.epsilon == 0.001);
    CHECK(c.fv.smooth_rate == 0.01);
    CHECK(c.data.num_parties == 3);
    CHECK(c.data.classes_per_party == std::vector<int>{8, 4, 4});
    CHECK(c.backbone.input_dim == 16);
    CHECK(c.seeds.data == 1);
    CHECK(c.seeds.init == 2);
    CHECK(c.seeds.fv == 3);
    CHECK(c.seeds.batching == 4);
    CHECK(c.initial_weighting == InitialWeighting::kSizeProportional);
}

TEST_CASE("decay boundaries default to 40 70 and 92 percent of the budget") {
    CHECK(default_decay_rounds(200) == std::vector<int>{80, 140, 184});
    CHECK(default_decay_rounds(100) == std::vector<int>{40, 70, 92});
    CHECK(default_decay_rounds(10) == std::vector<int>{4, 7, 9});
    // Tiny budgets keep the list strictly increasing and at least round 1.
    for (int r = 1; r <= 6; ++r) {
        const std::vector<int> d = default_decay_rounds(r);
        for (std::size_t i = 0; i < d.size(); ++i) {
            CHECK(d[i] >= 1);
            if (i > 0) CHECK(d[i] > d[i - 1]);
        }
    }
}

TEST_CASE("unknown keys are rejected with their path") {
    CHECK(check_parse_error(R"({"rouds": 10})").find("rouds: unknown key") != std::string::npos);
    CHECK(check_parse_error(R"({"fv": {"phy": 0.5}})").find("fv.phy: unknown key") !=
          std::string::npos);
    CHECK(check_parse_error(R"({"lr": {"decay": [1]}})").find("lr.decay: unknown key") !=
          std::string::npos);
}

TEST_CASE("range violations name the field the constraint and the value") {
    CHECK(check_parse_error(R"({"fv": {"phi": 0}})") == "fv.phi: must be in (0, 1], got 0");
    CHECK(check_parse_error(R"({"beta": 1.0})").find("beta") != std::string::npos);
    CHECK(check_parse_error(R"({"beta": 1.0})").find("got 1.0") != std::string::npos);
    CHECK(check_parse_error(R"({"method": "sgd"})").find("method") != std::string::npos);
    CHECK(check_parse_error(R"({"rounds": 0})").find("rounds") != std::string::npos);
    CHECK(check_parse_error(R"({"lr": {"decay_rounds": [5, 5]}})").find("decay_rounds") !=
          std::string::npos);
    CHECK(check_parse_error(R"({"backbone": {"input_dim": 8}})").find("input_dim") !=
          std::string::npos);
    CHECK(check_parse_error("not json") != "");
}

TEST_CASE("serialization round trips through the parser") {
    ExperimentConfig c = parse_config(kSmallConfig);
    const std::string once = to_json(c);
    const ExperimentConfig back = parse_config(once);
    CHECK(to_json(back) == once);
    CHECK(back.method == Method::kPfmFv);
    CHECK(back.hyper.rounds == 4);
    CHECK(back.hyper.lr.decay_rounds == std::vector<int>{3});
    CHECK(back.backbone.feature_dim == 8);
    CHECK(back.data.seed == back.seeds.data);
}

TEST_CASE("the run hash tracks semantic changes only") {
    const ExperimentConfig a = parse_config(kSmallConfig);
    const ExperimentConfig b = parse_config(kSmallConfig);
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);

    ExperimentConfig changed = a;
    changed.hyper.beta = 0.5;
    CHECK(config_hash(changed) != config_hash(a));
}

TEST_CASE("method names round trip") {
    for (const char* name : {"centralized", "fedavg", "fedavg_fv", "pfm", "pfm_fv"}) {
        CHECK(std::string(to_string(parse_method(name))) == name);
    }
    CHECK_THROWS(parse_method("madam"));
}

TEST_CASE("a run writes the full artifact set keyed by the config hash") {
    const TempDir tmp("run_artifacts");
    const fs::path cfg = write_config(tmp, "config.json", kSmallConfig);

    CliOptions opts;
    opts.out_override = (tmp.path / "out").string();
    opts.threads = 2;
    REQUIRE(cmd_run(cfg.string(), opts) == 0);

    const ExperimentConfig parsed = parse_config(kSmallConfig);
    const fs::path run_dir = tmp.path / "out" / config_hash(parsed);
    REQUIRE(fs::is_directory(run_dir));
    CHECK(fs::exists(run_dir / "config.json"));
    CHECK(fs::exists(run_dir / "metrics.csv"));
    CHECK(fs::exists(run_dir / "metrics.schema.txt"));
    CHECK(fs::exists(run_dir / "fv_trace.csv"));
    CHECK(fs::exists(run_dir / "events.log"));
    CHECK(fs::exists(run_dir / "checkpoint.bin"));

    // Round-major metrics: header plus rounds x parties rows.
    const std::string metrics = read_file(run_dir / "metrics.csv");
    CHECK(line_count(metrics) == 1 + 4 * 3);
    CHECK(metrics.rfind("round,party,loss,w_0,w_1,w_2,score", 0) == 0);

    const std::string saved_config = read_file(run_dir / "config.json");
    CHECK(saved_config == to_json(parsed));
}

TEST_CASE("reruns of the same config are byte identical even across worker counts") {
    const TempDir tmp("run_repro");
    const fs::path cfg = write_config(tmp, "config.json", kSmallConfig);

    CliOptions serial;
    serial.out_override = (tmp.path / "a").string();
    serial.threads = 1;
    REQUIRE(cmd_run(cfg.string(), serial) == 0);

    CliOptions parallel;
    parallel.out_override = (tmp.path / "b").string();
    parallel.threads = 4;
    REQUIRE(cmd_run(cfg.string(), parallel) == 0);

    const std::string hash = config_hash(parse_config(kSmallConfig));
    for (const char* name : {"metrics.csv", "fv_trace.csv", "events.log", "config.json"}) {
        CHECK(read_file(tmp.path / "a" / hash / name) == read_file(tmp.path / "b" / hash / name));
    }
    CHECK(read_file(tmp.path / "a" / hash / "checkpoint.bin") ==
          read_file(tmp.path / "b" / hash / "checkpoint.bin"));
}

TEST_CASE("the seed override rederives every stream and renames the run") {
    const TempDir tmp("run_seed");
    const fs::path cfg = write_config(tmp, "config.json", kSmallConfig);

    CliOptions opts;
    opts.out_override = (tmp.path / "out").string();
    opts.has_seed_override = true;
    opts.seed_override = 777;
    REQUIRE(cmd_run(cfg.string(), opts) == 0);

    const std::string base_hash = config_hash(parse_config(kSmallConfig));
    CHECK_FALSE(fs::exists(tmp.path / "out" / base_hash));

    // Exactly one run directory exists and its config carries derived seeds.
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(tmp.path / "out")) dirs.push_back(entry.path());
    REQUIRE(dirs.size() == 1);
    const ExperimentConfig written = parse_config(read_file(dirs[0] / "config.json"));
    CHECK(written.seeds.data != 1);
    CHECK(written.seeds.init != 2);
    CHECK(written.seeds.data != written.seeds.init);
}

TEST_CASE("config errors exit with the usage code") {
    const TempDir tmp("run_bad");
    CliOptions opts;
    opts.out_override = (tmp.path / "out").string();
    CHECK(cmd_run((tmp.path / "missing.json").string(), opts) == 2);
    const fs::path bad = write_config(tmp, "bad.json", R"({"rounds": -1})");
    CHECK(cmd_run(bad.string(), opts) == 2);
}

TEST_CASE("the comparison command writes one row per method and shard") {
    const TempDir tmp("compare");
    const fs::path cfg = write_config(tmp, "config.json", R"({
  "rounds": 3,
  "local_steps": 2,
  "batch_size": 8,
  "lr": {"decay_rounds": [2]},
  "data": {"samples_per_class": 8},
  "backbone": {"hidden_dims": [8], "feature_dim": 8}
})");
    CliOptions opts;
    opts.out_override = (tmp.path / "out").string();
    opts.threads = 2;
    REQUIRE(cmd_compare(cfg.string(), opts) == 0);

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(tmp.path / "out")) dirs.push_back(entry.path());
    REQUIRE(dirs.size() == 1);
    const std::string csv = read_file(dirs[0] / "compare.csv");
    CHECK(line_count(csv) == 1 + 5 * 3);
    CHECK(csv.rfind("method,shard,score,delta", 0) == 0);
    CHECK(csv.find("centralized,0,") != std::string::npos);
    CHECK(csv.find("pfm_fv,2,") != std::string::npos);
}

TEST_CASE("a mid-run checkpoint feeds the exhaustive search command") {
    const TempDir tmp("grid");
    const fs::path cfg = write_config(tmp, "config.json", R"({
  "method": "pfm",
  "rounds": 4,
  "local_steps": 2,
  "batch_size": 8,
  "lr": {"decay_rounds": [3]},
  "data": {"samples_per_class": 8},
  "backbone": {"hidden_dims": [8], "feature_dim": 8},
  "checkpoint_every": 2
})");
    CliOptions opts;
    opts.out_override = (tmp.path / "out").string();
    REQUIRE(cmd_run(cfg.string(), opts) == 0);

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(tmp.path / "out")) dirs.push_back(entry.path());
    REQUIRE(dirs.size() == 1);
    const fs::path ckpt = dirs[0] / "checkpoint_r0002.bin";
    REQUIRE(fs::exists(ckpt));

    CliOptions grid_opts;
    grid_opts.threads = 2;
    grid_opts.out_override = opts.out_override;
    REQUIRE(cmd_gridsearch(ckpt.string(), 2, grid_opts) == 0);
    const std::string csv = read_file(dirs[0] / "grid_2.csv");
    CHECK(line_count(csv) == 1 + 6);
    CHECK(csv.rfind("w_0,w_1,w_2,", 0) == 0);

    // Usage violations: resolution too small, or a non-three-party checkpoint.
    CHECK(cmd_gridsearch(ckpt.string(), 1, grid_opts) == 2);
    CHECK(cmd_gridsearch((tmp.path / "nope.bin").string(), 2, grid_opts) == 2);
}

TEST_CASE("the gradient check command reports pass and fail through exit codes") {
    CliOptions opts;
    CHECK(cmd_gradcheck("", 3, 1e-5, false, opts) == 0);
    CHECK(cmd_gradcheck("", 3, 1e-5, true, opts) == 1);
}

TEST_CASE("csv doubles round trip through text exactly") {
    for (const double v : {1.0 / 3.0, 1e-300, -0.0, 123456.789, 0.1}) {
        const std::string cell = csv_double(v);
        CHECK(std::stod(cell) == v);
    }
}

TEST_CASE("output roots resolve in override env config order") {
    // setenv/unsetenv keep this hermetic.
    ::setenv("FEDSIM_OUT_ROOT", "/tmp/env_root", 1);
    CHECK(resolve_out_root("/tmp/explicit", "runs") == "/tmp/explicit");
    CHECK(resolve_out_root("", "runs") == "/tmp/env_root");
    ::unsetenv("FEDSIM_OUT_ROOT");
    CHECK(resolve_out_root("", "runs") == "runs");
}

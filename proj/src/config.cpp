#include "fedsim/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fedsim/errors.hpp"
#include "json.hpp"

namespace fedsim {

namespace {

using nlohmann::json;

std::string field(const std::string& prefix, const char* key) {
    return prefix.empty() ? key : prefix + "." + key;
}

void check_keys(const json& obj, const std::string& prefix,
                std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return it.key() == k; });
        if (!known) throw ConfigError(field(prefix, it.key().c_str()) + ": unknown key");
    }
}

const json* find(const json& obj, const char* key) {
    const auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

double get_num(const json& obj, const std::string& prefix, const char* key, double fallback,
               const char* constraint, bool (*ok)(double)) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_number())
        throw ConfigError(field(prefix, key) + ": must be a number, got " + v->dump());
    const double x = v->get<double>();
    if (!ok(x)) throw ConfigError(field(prefix, key) + ": " + constraint + ", got " + v->dump());
    return x;
}

int get_int(const json& obj, const std::string& prefix, const char* key, int fallback,
            const char* constraint, bool (*ok)(int)) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_number_integer())
        throw ConfigError(field(prefix, key) + ": must be an integer, got " + v->dump());
    const int x = v->get<int>();
    if (!ok(x)) throw ConfigError(field(prefix, key) + ": " + constraint + ", got " + v->dump());
    return x;
}

std::uint64_t get_u64(const json& obj, const std::string& prefix, const char* key,
                      std::uint64_t fallback) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!(v->is_number_unsigned() || (v->is_number_integer() && v->get<std::int64_t>() >= 0)))
        throw ConfigError(field(prefix, key) + ": must be a non-negative integer, got " +
                          v->dump());
    return v->get<std::uint64_t>();
}

std::string get_str(const json& obj, const std::string& prefix, const char* key,
                    const std::string& fallback) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_string())
        throw ConfigError(field(prefix, key) + ": must be a string, got " + v->dump());
    return v->get<std::string>();
}

std::vector<int> get_int_list(const json& obj, const std::string& prefix, const char* key,
                              std::vector<int> fallback, const char* constraint, bool (*ok)(int)) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_array())
        throw ConfigError(field(prefix, key) + ": must be an array of integers, got " + v->dump());
    std::vector<int> out;
    for (const json& e : *v) {
        if (!e.is_number_integer())
            throw ConfigError(field(prefix, key) + ": must be an array of integers, got " +
                              v->dump());
        const int x = e.get<int>();
        if (!ok(x))
            throw ConfigError(field(prefix, key) + ": " + constraint + ", got " + e.dump());
        out.push_back(x);
    }
    return out;
}

std::vector<double> get_num_list(const json& obj, const std::string& prefix, const char* key,
                                 std::vector<double> fallback, const char* constraint,
                                 bool (*ok)(double)) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_array())
        throw ConfigError(field(prefix, key) + ": must be an array of numbers, got " + v->dump());
    std::vector<double> out;
    for (const json& e : *v) {
        if (!e.is_number())
            throw ConfigError(field(prefix, key) + ": must be an array of numbers, got " +
                              v->dump());
        const double x = e.get<double>();
        if (!ok(x))
            throw ConfigError(field(prefix, key) + ": " + constraint + ", got " + e.dump());
        out.push_back(x);
    }
    return out;
}

const json kEmptyObject = json::object();

const json& section(const json& root, const char* key) {
    const json* v = find(root, key);
    if (!v) return kEmptyObject;
    if (!v->is_object()) throw ConfigError(std::string(key) + ": must be an object");
    return *v;
}

bool positive_d(double x) { return x > 0.0; }
bool unit_open_closed(double x) { return x > 0.0 && x <= 1.0; }
bool unit_closed_open(double x) { return x >= 0.0 && x < 1.0; }
bool positive_i(int x) { return x >= 1; }
bool non_negative_i(int x) { return x >= 0; }

}  // namespace

Method parse_method(const std::string& name) {
    if (name == "centralized") return Method::kCentralized;
    if (name == "fedavg") return Method::kFedAvg;
    if (name == "fedavg_fv") return Method::kFedAvgFv;
    if (name == "pfm") return Method::kPfm;
    if (name == "pfm_fv") return Method::kPfmFv;
    throw std::invalid_argument("unknown method: " + name);
}

const char* to_string(Method m) {
    switch (m) {
        case Method::kCentralized: return "centralized";
        case Method::kFedAvg: return "fedavg";
        case Method::kFedAvgFv: return "fedavg_fv";
        case Method::kPfm: return "pfm";
        case Method::kPfmFv: return "pfm_fv";
    }
    return "?";
}

std::vector<int> default_decay_rounds(int rounds) {
    const int raw[3] = {(rounds * 2) / 5, (rounds * 7) / 10, (rounds * 23) / 25};
    std::vector<int> out;
    for (int b : raw) {
        if (b >= 1 && (out.empty() || b > out.back())) out.push_back(b);
    }
    return out;
}

HeadSpec ExperimentConfig::head_for(int num_classes) const {
    return HeadSpec{backbone.feature_dim, num_classes, head_loss, head_scale_s, head_margin_m};
}

void ExperimentConfig::validate() const {
    hyper.validate();
    fv.validate();
    data.validate();
    backbone.validate();
    head_for(2).validate();
    if (backbone.input_dim != data.input_dim)
        throw std::invalid_argument("ExperimentConfig: backbone.input_dim must equal data.input_dim");
    if (checkpoint_every < 0)
        throw std::invalid_argument("ExperimentConfig: checkpoint_every must be non-negative");
    if (output_dir.empty())
        throw std::invalid_argument("ExperimentConfig: output_dir must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    check_keys(root, "",
               {"method", "rounds", "local_steps", "beta", "batch_size", "lr", "fv", "data",
                "backbone", "head", "validator", "seeds", "output_dir", "checkpoint_every",
                "initial_weighting"});

    ExperimentConfig c;

    const std::string method_name = get_str(root, "", "method", "pfm");
    try {
        c.method = parse_method(method_name);
    } catch (const std::invalid_argument&) {
        throw ConfigError("method: must be one of centralized|fedavg|fedavg_fv|pfm|pfm_fv, got \"" +
                          method_name + "\"");
    }

    c.hyper.rounds = get_int(root, "", "rounds", 200, "must be positive", positive_i);
    c.hyper.local_steps = get_int(root, "", "local_steps", 50, "must be positive", positive_i);
    c.hyper.beta = get_num(root, "", "beta", 0.9, "must be in [0, 1)", unit_closed_open);
    c.hyper.batch_size = get_int(root, "", "batch_size", 32, "must be positive", positive_i);

    const json& lr = section(root, "lr");
    check_keys(lr, "lr", {"base", "decay_factor", "decay_rounds"});
    c.hyper.lr.base = get_num(lr, "lr", "base", 0.1, "must be positive", positive_d);
    c.hyper.lr.decay_factor =
        get_num(lr, "lr", "decay_factor", 0.1, "must be in (0, 1]", unit_open_closed);
    c.hyper.lr.decay_rounds =
        get_int_list(lr, "lr", "decay_rounds", default_decay_rounds(c.hyper.rounds),
                     "must be non-negative", non_negative_i);
    for (std::size_t i = 1; i < c.hyper.lr.decay_rounds.size(); ++i) {
        if (c.hyper.lr.decay_rounds[i] <= c.hyper.lr.decay_rounds[i - 1])
            throw ConfigError("lr.decay_rounds: must be strictly increasing");
    }

    const json& fv = section(root, "fv");
    check_keys(fv, "fv", {"candidates", "epsilon", "phi", "gamma", "norm", "every"});
    c.fv.candidates_per_round =
        get_int(fv, "fv", "candidates", 3, "must be positive", positive_i);
    c.fv.epsilon = get_num(fv, "fv", "epsilon", 0.001, "must be positive", positive_d);
    c.fv.smooth_rate = get_num(fv, "fv", "phi", 0.01, "must be in (0, 1]", unit_open_closed);
    c.fv.moving_rate = get_num(fv, "fv", "gamma", 0.01, "must be in (0, 1]", unit_open_closed);
    const std::string norm = get_str(fv, "fv", "norm", "local");
    if (norm == "local") c.fv.norm = NormStrategy::kLocal;
    else if (norm == "moving") c.fv.norm = NormStrategy::kMoving;
    else if (norm == "none") c.fv.norm = NormStrategy::kNone;
    else throw ConfigError("fv.norm: must be one of local|moving|none, got \"" + norm + "\"");
    c.fv.fv_every = get_int(fv, "fv", "every", 1, "must be positive", positive_i);

    const json& data = section(root, "data");
    check_keys(data, "data",
               {"num_parties", "classes_per_party", "samples_per_class", "samples_scale",
                "input_dim", "class_separation", "noise_sigma"});
    c.data.num_parties = get_int(data, "data", "num_parties", 3, "must be positive", positive_i);
    const bool default_parties = c.data.num_parties == 3;
    c.data.classes_per_party = get_int_list(
        data, "data", "classes_per_party",
        default_parties ? std::vector<int>{8, 4, 4} : std::vector<int>(c.data.num_parties, 4),
        "must be positive", positive_i);
    if (static_cast<int>(c.data.classes_per_party.size()) != c.data.num_parties)
        throw ConfigError("data.classes_per_party: must have one entry per party, got " +
                          std::to_string(c.data.classes_per_party.size()));
    c.data.samples_per_class =
        get_int(data, "data", "samples_per_class", 24, "must be positive", positive_i);
    c.data.samples_scale = get_num_list(
        data, "data", "samples_scale",
        default_parties ? std::vector<double>{4.0, 2.0, 1.0}
                        : std::vector<double>(c.data.num_parties, 1.0),
        "must be positive", positive_d);
    if (static_cast<int>(c.data.samples_scale.size()) != c.data.num_parties)
        throw ConfigError("data.samples_scale: must have one entry per party, got " +
                          std::to_string(c.data.samples_scale.size()));
    c.data.input_dim = get_int(data, "data", "input_dim", 16, "must be positive", positive_i);
    c.data.class_separation =
        get_num(data, "data", "class_separation", 4.0, "must be positive", positive_d);
    c.data.noise_sigma = get_num(data, "data", "noise_sigma", 1.0, "must be positive", positive_d);

    const json& backbone = section(root, "backbone");
    check_keys(backbone, "backbone", {"input_dim", "hidden_dims", "feature_dim", "activation"});
    c.backbone.input_dim =
        get_int(backbone, "backbone", "input_dim", c.data.input_dim, "must be positive",
                positive_i);
    c.backbone.hidden_dims = get_int_list(backbone, "backbone", "hidden_dims", {32},
                                          "must be positive", positive_i);
    c.backbone.feature_dim =
        get_int(backbone, "backbone", "feature_dim", 16, "must be positive", positive_i);
    const std::string act = get_str(backbone, "backbone", "activation", "tanh");
    if (act == "tanh") c.backbone.activation = Activation::kTanh;
    else if (act == "relu") c.backbone.activation = Activation::kRelu;
    else throw ConfigError("backbone.activation: must be one of tanh|relu, got \"" + act + "\"");
    if (c.backbone.input_dim != c.data.input_dim)
        throw ConfigError("backbone.input_dim: must equal data.input_dim, got " +
                          std::to_string(c.backbone.input_dim));

    const json& head = section(root, "head");
    check_keys(head, "head", {"loss", "scale_s", "margin_m"});
    const std::string loss = get_str(head, "head", "loss", "softmax_ce");
    if (loss == "softmax_ce") c.head_loss = HeadLoss::kSoftmaxCe;
    else if (loss == "cosine_margin") c.head_loss = HeadLoss::kCosineMargin;
    else
        throw ConfigError("head.loss: must be one of softmax_ce|cosine_margin, got \"" + loss +
                          "\"");
    c.head_scale_s = get_num(head, "head", "scale_s", 64.0, "must be positive", positive_d);
    c.head_margin_m =
        get_num(head, "head", "margin_m", 0.35, "must be in [0, 1)", unit_closed_open);

    const std::string validator = get_str(root, "", "validator", "verification");
    if (validator == "verification") c.validator = ScoreKind::kVerification;
    else if (validator == "accuracy") c.validator = ScoreKind::kAccuracy;
    else
        throw ConfigError("validator: must be one of verification|accuracy, got \"" + validator +
                          "\"");

    const json& seeds = section(root, "seeds");
    check_keys(seeds, "seeds", {"data", "init", "fv", "batching"});
    c.seeds.data = get_u64(seeds, "seeds", "data", 1);
    c.seeds.init = get_u64(seeds, "seeds", "init", 2);
    c.seeds.fv = get_u64(seeds, "seeds", "fv", 3);
    c.seeds.batching = get_u64(seeds, "seeds", "batching", 4);

    c.output_dir = get_str(root, "", "output_dir", "runs");
    if (c.output_dir.empty()) throw ConfigError("output_dir: must not be empty, got \"\"");
    c.checkpoint_every =
        get_int(root, "", "checkpoint_every", 0, "must be non-negative", non_negative_i);

    const std::string weighting = get_str(root, "", "initial_weighting", "size_proportional");
    if (weighting == "size_proportional") c.initial_weighting = InitialWeighting::kSizeProportional;
    else if (weighting == "uniform") c.initial_weighting = InitialWeighting::kUniform;
    else
        throw ConfigError(
            "initial_weighting: must be one of size_proportional|uniform, got \"" + weighting +
            "\"");

    c.data.seed = c.seeds.data;
    try {
        c.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string to_json(const ExperimentConfig& c) {
    json j;
    j["method"] = to_string(c.method);
    j["rounds"] = c.hyper.rounds;
    j["local_steps"] = c.hyper.local_steps;
    j["beta"] = c.hyper.beta;
    j["batch_size"] = c.hyper.batch_size;
    j["lr"] = {{"base", c.hyper.lr.base},
               {"decay_factor", c.hyper.lr.decay_factor},
               {"decay_rounds", c.hyper.lr.decay_rounds}};
    j["fv"] = {{"candidates", c.fv.candidates_per_round}, {"epsilon", c.fv.epsilon},
               {"phi", c.fv.smooth_rate},                 {"gamma", c.fv.moving_rate},
               {"norm", to_string(c.fv.norm)},            {"every", c.fv.fv_every}};
    j["data"] = {{"num_parties", c.data.num_parties},
                 {"classes_per_party", c.data.classes_per_party},
                 {"samples_per_class", c.data.samples_per_class},
                 {"samples_scale", c.data.samples_scale},
                 {"input_dim", c.data.input_dim},
                 {"class_separation", c.data.class_separation},
                 {"noise_sigma", c.data.noise_sigma}};
    j["backbone"] = {{"input_dim", c.backbone.input_dim},
                     {"hidden_dims", c.backbone.hidden_dims},
                     {"feature_dim", c.backbone.feature_dim},
                     {"activation", to_string(c.backbone.activation)}};
    j["head"] = {{"loss", to_string(c.head_loss)},
                 {"scale_s", c.head_scale_s},
                 {"margin_m", c.head_margin_m}};
    j["validator"] = to_string(c.validator);
    j["seeds"] = {{"data", c.seeds.data},
                  {"init", c.seeds.init},
                  {"fv", c.seeds.fv},
                  {"batching", c.seeds.batching}};
    j["output_dir"] = c.output_dir;
    j["checkpoint_every"] = c.checkpoint_every;
    j["initial_weighting"] =
        c.initial_weighting == InitialWeighting::kUniform ? "uniform" : "size_proportional";
    return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& config) {
    const std::string text = to_json(config);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char b : text) {
        h ^= b;
        h *= 1099511628211ull;
    }
    static const char* digits = "0123456789abcdef";
    std::string hex(16, '0');
    for (int i = 15; i >= 0; --i) {
        hex[i] = digits[h & 0xf];
        h >>= 4;
    }
    return hex;
}

}  // namespace fedsim

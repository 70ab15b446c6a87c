#include "fedsim/fed_core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'S', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw std::runtime_error("checkpoint file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

}  // namespace

double LrSchedule::eta(int round) const {
    double rate = base;
    for (int boundary : decay_rounds) {
        if (boundary <= round) rate *= decay_factor;
    }
    return rate;
}

void LrSchedule::validate() const {
    if (!(base > 0.0) || !std::isfinite(base))
        throw std::invalid_argument("LrSchedule: base must be positive");
    if (!(decay_factor > 0.0) || decay_factor > 1.0)
        throw std::invalid_argument("LrSchedule: decay_factor must be in (0, 1]");
    for (std::size_t i = 0; i < decay_rounds.size(); ++i) {
        if (decay_rounds[i] < 0)
            throw std::invalid_argument("LrSchedule: decay_rounds must be non-negative");
        if (i > 0 && decay_rounds[i] <= decay_rounds[i - 1])
            throw std::invalid_argument("LrSchedule: decay_rounds must be strictly increasing");
    }
}

void HyperParams::validate() const {
    if (rounds < 1) throw std::invalid_argument("HyperParams: rounds must be positive");
    if (local_steps < 1) throw std::invalid_argument("HyperParams: local_steps must be positive");
    if (!(beta >= 0.0) || beta >= 1.0)
        throw std::invalid_argument("HyperParams: beta must be in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("HyperParams: batch_size must be positive");
    lr.validate();
}

BatchStream::BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), seed_(seed) {
    if (n == 0) throw std::invalid_argument("BatchStream: empty training set");
    if (batch_size == 0) throw std::invalid_argument("BatchStream: batch_size must be positive");
    batch_len_ = std::min(batch_size, n);
    num_batches_ = std::max<std::size_t>(1, n / batch_size);
}

std::vector<std::size_t> BatchStream::next_indices(BatchCursor& cursor) const {
    if (cursor.pos >= num_batches_)
        throw std::invalid_argument("BatchStream: cursor position out of range");
    if (!cache_valid_ || cached_epoch_ != cursor.epoch) {
        cached_perm_.resize(n_);
        std::iota(cached_perm_.begin(), cached_perm_.end(), std::size_t{0});
        Rng rng(derive_seed(seed_, cursor.epoch));
        rng.shuffle(cached_perm_);
        cached_epoch_ = cursor.epoch;
        cache_valid_ = true;
    }
    const std::size_t begin = cursor.pos * batch_len_;
    std::vector<std::size_t> indices(cached_perm_.begin() + begin,
                                     cached_perm_.begin() + begin + batch_len_);
    if (cursor.pos + 1 == num_batches_) {
        cursor.epoch += 1;
        cursor.pos = 0;
    } else {
        cursor.pos += 1;
    }
    return indices;
}

Batch gather_batch(const Batch& data, std::span<const std::size_t> indices) {
    Batch out;
    out.inputs = Matrix(indices.size(), data.inputs.cols);
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t src = indices[r];
        if (src >= data.size()) throw std::invalid_argument("gather_batch: index out of range");
        std::copy(data.inputs.row(src), data.inputs.row(src) + data.inputs.cols, out.inputs.row(r));
        out.labels.push_back(data.labels[src]);
    }
    return out;
}

void classifier_step(double beta, double eta, const ParamVec& grad, ParamVec& m_omega,
                     ParamVec& omega) {
    m_omega = axpy(beta, m_omega, grad);
    omega = axpy(-eta, m_omega, omega);
}

ParamVec backbone_step_pfm(double beta, double eta, int local_steps, const ParamVec& grad,
                           const ParamVec& global_momentum, const ParamVec& theta) {
    if (local_steps < 1) throw std::invalid_argument("backbone_step_pfm: local_steps positive");
    // The zero-beta branch must execute the exact instruction sequence of
    // plain SGD, so a zero-momentum correction cannot perturb sign bits.
    if (beta == 0.0) return axpy(-eta, grad, theta);
    const ParamVec corrected = axpy(beta / static_cast<double>(local_steps), global_momentum, grad);
    return axpy(-eta, corrected, theta);
}

LocalRoundResult run_local_round(const BackboneSpec& b_spec, const HeadSpec& h_spec,
                                 const Batch& train, const TrainerState& start,
                                 const ParamVec& global_theta, const ParamVec& global_momentum,
                                 LocalMode mode, const HyperParams& hyper, double eta,
                                 std::uint64_t stream_seed) {
    hyper.validate();
    if (!(eta > 0.0) || !std::isfinite(eta))
        throw std::invalid_argument("run_local_round: eta must be positive");
    const double beta = mode == LocalMode::kFedAvg ? 0.0 : hyper.beta;

    LocalRoundResult result{start, {}};
    result.state.theta = global_theta;
    result.step_losses.reserve(hyper.local_steps);

    const BatchStream stream(train.size(), static_cast<std::size_t>(hyper.batch_size),
                             stream_seed);
    for (int k = 0; k < hyper.local_steps; ++k) {
        const Batch batch = gather_batch(train, stream.next_indices(result.state.cursor));
        const LossGrads lg =
            loss_and_grads(b_spec, h_spec, result.state.theta, result.state.omega, batch);
        classifier_step(beta, eta, lg.head_grad, result.state.m_omega, result.state.omega);
        result.state.theta = backbone_step_pfm(beta, eta, hyper.local_steps, lg.backbone_grad,
                                               global_momentum, result.state.theta);
        result.step_losses.push_back(lg.loss);
    }
    return result;
}

ParamVec aggregate_and_update_momentum(ServerState& server, std::span<const ParamVec> thetas,
                                       double beta, double eta) {
    if (thetas.size() != server.w.size())
        throw std::invalid_argument("aggregate: weighting length mismatch");
    if (!(eta > 0.0) || !std::isfinite(eta))
        throw std::invalid_argument("aggregate: eta must be positive");
    const ParamVec theta_new = weighted_sum(thetas, server.w.span());
    if (theta_new.size() != server.global_theta.size())
        throw std::invalid_argument("aggregate: backbone length mismatch");

    // Momentum recovery is the literal displacement quotient so that the
    // telescoped identity M = beta*M_old + G holds to rounding.
    std::vector<double> m(theta_new.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = (server.global_theta[i] - theta_new[i]) / eta;
        if (!std::isfinite(m[i]))
            throw DivergenceError("aggregation produced non-finite momentum");
    }
    ParamVec momentum = ParamVec::from_values(std::move(m));
    const ParamVec global_grad = axpy(-beta, server.global_momentum, momentum);

    server.global_theta = theta_new;
    server.global_momentum = std::move(momentum);
    server.round += 1;
    return global_grad;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_u64(out, ckpt.config_json.size());
    out.write(ckpt.config_json.data(), static_cast<std::streamsize>(ckpt.config_json.size()));

    write_u64(out, static_cast<std::uint64_t>(ckpt.server.round));
    ParamVec::from_values(ckpt.server.w.values()).write_record(out);
    ckpt.server.global_theta.write_record(out);
    ckpt.server.global_momentum.write_record(out);

    write_u64(out, ckpt.trainers.size());
    for (const TrainerState& t : ckpt.trainers) {
        write_u64(out, static_cast<std::uint64_t>(t.party_id));
        t.theta.write_record(out);
        t.omega.write_record(out);
        t.m_omega.write_record(out);
        write_u64(out, t.cursor.epoch);
        write_u64(out, t.cursor.pos);
    }

    write_u64(out, ckpt.validator_stats.size());
    for (const MovingStats& s : ckpt.validator_stats) {
        write_f64(out, s.mu);
        write_f64(out, s.nu);
        out.put(s.initialized ? 1 : 0);
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw std::runtime_error("load_checkpoint: bad magic in " + path);

    Checkpoint ckpt;
    const std::uint64_t json_len = read_u64(in);
    ckpt.config_json.resize(json_len);
    in.read(ckpt.config_json.data(), static_cast<std::streamsize>(json_len));
    if (!in) throw std::runtime_error("checkpoint file truncated");

    ckpt.server.round = static_cast<int>(read_u64(in));
    ckpt.server.w = Weighting(ParamVec::read_record(in).values());
    ckpt.server.global_theta = ParamVec::read_record(in);
    ckpt.server.global_momentum = ParamVec::read_record(in);

    const std::uint64_t n_trainers = read_u64(in);
    ckpt.trainers.resize(n_trainers);
    for (TrainerState& t : ckpt.trainers) {
        t.party_id = static_cast<int>(read_u64(in));
        t.theta = ParamVec::read_record(in);
        t.omega = ParamVec::read_record(in);
        t.m_omega = ParamVec::read_record(in);
        t.cursor.epoch = read_u64(in);
        t.cursor.pos = read_u64(in);
    }

    const std::uint64_t n_stats = read_u64(in);
    ckpt.validator_stats.resize(n_stats);
    for (MovingStats& s : ckpt.validator_stats) {
        s.mu = read_f64(in);
        s.nu = read_f64(in);
        const int flag = in.get();
        if (flag < 0) throw std::runtime_error("checkpoint file truncated");
        s.initialized = flag != 0;
    }
    return ckpt;
}

}  // namespace fedsim

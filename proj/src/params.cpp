#include "fedsim/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace fedsim {

namespace {

void require(bool ok, const char* message) {
    if (!ok) throw std::invalid_argument(message);
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw std::runtime_error("ParamVec record truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

}  // namespace

ParamVec ParamVec::zeros(std::size_t n) {
    return ParamVec(std::vector<double>(n, 0.0));
}

ParamVec ParamVec::from_values(std::vector<double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("ParamVec: non-finite entry");
    }
    return ParamVec(std::move(values));
}

void ParamVec::write_record(std::ostream& out) const {
    write_u64_le(out, values_.size());
    for (double v : values_) write_u64_le(out, std::bit_cast<std::uint64_t>(v));
}

ParamVec ParamVec::read_record(std::istream& in) {
    const std::uint64_t n = read_u64_le(in);
    std::vector<double> values(n);
    for (std::uint64_t i = 0; i < n; ++i) values[i] = std::bit_cast<double>(read_u64_le(in));
    return from_values(std::move(values));
}

ParamVec axpy(double a, const ParamVec& x, const ParamVec& y) {
    require(std::isfinite(a), "axpy: non-finite scale");
    require(x.size() == y.size(), "axpy: length mismatch");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + y[i];
    return ParamVec::from_values(std::move(out));
}

ParamVec weighted_sum(std::span<const ParamVec> vs, std::span<const double> w) {
    require(!vs.empty(), "weighted_sum: empty input");
    require(vs.size() == w.size(), "weighted_sum: weight count mismatch");
    const std::size_t n = vs.front().size();
    for (const ParamVec& v : vs) require(v.size() == n, "weighted_sum: length mismatch");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < vs.size(); ++i) {
        const double wi = w[i];
        const std::vector<double>& vi = vs[i].values();
        for (std::size_t j = 0; j < n; ++j) out[j] += wi * vi[j];
    }
    return ParamVec::from_values(std::move(out));
}

double dist_inf(const ParamVec& x, const ParamVec& y) {
    require(x.size() == y.size(), "dist_inf: length mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) d = std::max(d, std::abs(x[i] - y[i]));
    return d;
}

std::uint64_t checksum(const ParamVec& v) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double d : v.values()) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffu;
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace fedsim

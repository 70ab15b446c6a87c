#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace fedsim {

// Flat vector of 64-bit reals; the universal currency for backbones, heads,
// momentum buffers and gradients. Length is fixed at construction and every
// entry is finite; construction rejects NaN/Inf so downstream operations can
// rely on finite inputs.
class ParamVec {
public:
    ParamVec() = default;

    static ParamVec zeros(std::size_t n);
    // Validates finiteness; throws std::invalid_argument on NaN/Inf.
    static ParamVec from_values(std::vector<double> values);

    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    double operator[](std::size_t i) const { return values_[i]; }
    const std::vector<double>& values() const { return values_; }
    std::span<const double> span() const { return values_; }

    bool operator==(const ParamVec& other) const { return values_ == other.values_; }

    // Little-endian binary record: u64 length + 8-byte IEEE754 payload.
    void write_record(std::ostream& out) const;
    static ParamVec read_record(std::istream& in);

private:
    explicit ParamVec(std::vector<double> v) : values_(std::move(v)) {}
    std::vector<double> values_;
};

// a*x + y, element-wise. Throws on length mismatch or non-finite a/result.
ParamVec axpy(double a, const ParamVec& x, const ParamVec& y);

// Sum_i w[i]*vs[i], accumulated in ascending index order for bit-stable
// determinism. Throws on empty input or length mismatch.
ParamVec weighted_sum(std::span<const ParamVec> vs, std::span<const double> w);

// Max absolute element-wise difference.
double dist_inf(const ParamVec& x, const ParamVec& y);

// FNV-1a over the raw bytes; used to assert snapshots were not mutated.
std::uint64_t checksum(const ParamVec& v);

}  // namespace fedsim

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

TEST_CASE("ParamVec construction validates and preserves values") {
    const ParamVec v = ParamVec::from_values({1.0, -2.5, 0.0});
    CHECK(v.size() == 3);
    CHECK(v[1] == -2.5);
    CHECK(ParamVec::zeros(4).size() == 4);
    CHECK(ParamVec::zeros(4)[3] == 0.0);

    CHECK_THROWS_AS(ParamVec::from_values({1.0, std::nan("")}), std::invalid_argument);
    CHECK_THROWS_AS(ParamVec::from_values({std::numeric_limits<double>::infinity()}),
                    std::invalid_argument);
}

TEST_CASE("axpy computes a*x + y elementwise") {
    const ParamVec x = ParamVec::from_values({1.0, 2.0});
    const ParamVec y = ParamVec::from_values({10.0, 20.0});
    const ParamVec r = axpy(2.0, x, y);
    CHECK(r[0] == 12.0);
    CHECK(r[1] == 24.0);

    CHECK_THROWS_AS(axpy(1.0, x, ParamVec::zeros(3)), std::invalid_argument);
    CHECK_THROWS_AS(axpy(std::nan(""), x, y), std::invalid_argument);
}

TEST_CASE("weighted_sum matches a hand-rolled accumulation and picks one-hot exactly") {
    const std::vector<ParamVec> vs = {ParamVec::from_values({1.0, 2.0}),
                                      ParamVec::from_values({3.0, 4.0}),
                                      ParamVec::from_values({5.0, 6.0})};
    const std::vector<double> w = {0.2, 0.3, 0.5};
    const ParamVec r = weighted_sum(vs, w);
    for (std::size_t i = 0; i < 2; ++i) {
        double expect = 0.0;
        for (std::size_t k = 0; k < 3; ++k) expect += w[k] * vs[k][i];
        CHECK(r[i] == expect);
    }

    const std::vector<double> one_hot = {0.0, 1.0, 0.0};
    const ParamVec picked = weighted_sum(vs, one_hot);
    CHECK(picked == vs[1]);

    CHECK_THROWS_AS(weighted_sum(vs, std::vector<double>{0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("dist_inf is the max absolute difference") {
    const ParamVec a = ParamVec::from_values({1.0, 5.0, -2.0});
    const ParamVec b = ParamVec::from_values({1.5, 5.0, -4.0});
    CHECK(dist_inf(a, b) == 2.0);
    CHECK(dist_inf(a, a) == 0.0);
}

TEST_CASE("checksum distinguishes values and is stable") {
    const ParamVec a = ParamVec::from_values({1.0, 2.0});
    const ParamVec b = ParamVec::from_values({1.0, 2.0000000001});
    CHECK(checksum(a) == checksum(a));
    CHECK(checksum(a) != checksum(b));
}

TEST_CASE("binary records round-trip bitwise, including negative zero") {
    const ParamVec v = ParamVec::from_values({-0.0, 1.0 / 3.0, -1e-300, 1e300});
    std::stringstream ss;
    v.write_record(ss);
    const ParamVec back = ParamVec::read_record(ss);
    REQUIRE(back.size() == v.size());
    CHECK(back == v);
    CHECK(std::signbit(back[0]));

    std::stringstream truncated("abc");
    CHECK_THROWS(ParamVec::read_record(truncated));
}

TEST_CASE("seed derivation separates streams") {
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
    CHECK(derive_seed(7, 9) == derive_seed(7, 9));
}

TEST_CASE("Rng draws are deterministic and in range") {
    Rng a(123);
    Rng b(123);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform01();
        CHECK(u == b.uniform01());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    Rng c(123);
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t k = c.below(7);
        CHECK(k < 7);
    }
}

TEST_CASE("Rng normal matches moments on a large sample") {
    Rng rng(99);
    const int n = 50000;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum_sq += x * x;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("Rng shuffle is a permutation and seed-stable") {
    std::vector<int> items = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    Rng rng(5);
    rng.shuffle(items);
    CHECK(std::set<int>(items.begin(), items.end()).size() == 10);

    std::vector<int> again = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    Rng rng2(5);
    rng2.shuffle(again);
    CHECK(items == again);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "qest/parallel.hpp"
#include "qest/rng.hpp"

using namespace qest;

TEST_CASE("streams are deterministic in (seed, purpose, index)") {
    RngStream a(123, "test", 7);
    RngStream b(123, "test", 7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());

    RngStream c(123, "test", 8);
    RngStream d(123, "other", 7);
    RngStream e(124, "test", 7);
    RngStream ref(123, "test", 7);
    bool all_same_c = true, all_same_d = true, all_same_e = true;
    RngStream c2(123, "test", 8), d2(123, "other", 7), e2(124, "test", 7);
    for (int i = 0; i < 16; ++i) {
        const std::uint32_t r = ref.next_u32();
        all_same_c = all_same_c && (c2.next_u32() == r);
        all_same_d = all_same_d && (d2.next_u32() == r);
        all_same_e = all_same_e && (e2.next_u32() == r);
    }
    CHECK_FALSE(all_same_c);
    CHECK_FALSE(all_same_d);
    CHECK_FALSE(all_same_e);
    (void)c; (void)d; (void)e;
}

TEST_CASE("uniform moments and range") {
    RngStream rng(5, "uniform", 0);
    const int n = 200000;
    double total = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        total += u;
        sq += u * u;
    }
    const double mean = total / n;
    const double var = sq / n - mean * mean;
    // 4-sigma Monte Carlo bounds
    CHECK(std::fabs(mean - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
    CHECK(std::fabs(var - 1.0 / 12.0) < 4.0 * 0.0745 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("normal moments") {
    RngStream rng(6, "normal", 0);
    const int n = 200000;
    double total = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        total += z;
        sq += z * z;
    }
    const double mean = total / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::fabs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("categorical respects weights") {
    RngStream rng(9, "categorical", 0);
    const std::vector<double> cumulative{0.2, 0.5, 1.0};
    std::vector<int> counts(3, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(rng.categorical(cumulative, 1.0))];
    const std::vector<double> p{0.2, 0.3, 0.5};
    for (int k = 0; k < 3; ++k) {
        const double expect = p[static_cast<std::size_t>(k)] * n;
        const double sigma = std::sqrt(p[static_cast<std::size_t>(k)] *
                                       (1 - p[static_cast<std::size_t>(k)]) * n);
        CHECK(std::fabs(counts[static_cast<std::size_t>(k)] - expect) < 4.0 * sigma);
    }
}

TEST_CASE("parallel_for is order-independent for counter-based draws") {
    const int n = 64;
    std::vector<double> serial(n), threaded(n);
    parallel_for(n, 1, [&](int, std::int64_t i) {
        RngStream rng(77, "episode", static_cast<std::uint64_t>(i));
        serial[static_cast<std::size_t>(i)] = rng.uniform();
    });
    parallel_for(n, 4, [&](int, std::int64_t i) {
        RngStream rng(77, "episode", static_cast<std::uint64_t>(i));
        threaded[static_cast<std::size_t>(i)] = rng.uniform();
    });
    CHECK(serial == threaded);
}

TEST_CASE("parallel_for propagates exceptions") {
    CHECK_THROWS_AS(parallel_for(8, 2,
                                 [&](int, std::int64_t i) {
                                     if (i == 5) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
}

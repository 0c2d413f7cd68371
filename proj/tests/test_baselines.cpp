// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "beamgraph/baselines.hpp"
#include "beamgraph/dense_array.hpp"

using namespace beamgraph;
using namespace beamgraph::air;
using namespace beamgraph::base;

namespace {

ChannelSet random_channels(int n, int k, Rng& rng, double scale = 1.0) {
    ChannelSet h(n, k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
            h(i, j) = scale * cd(rng.normal(), rng.normal()) / std::sqrt(2.0);
    return h;
}

void check_feasible_codebook_strategy(const Strategy& t, double p_max) {
    for (int k = 0; k < t.cols(); ++k) {
        int nonzero = 0;
        for (int w = 0; w < t.rows(); ++w)
            nonzero += t(w, k) != 0.0;
        CHECK(nonzero <= 1);
    }
    CHECK(t.squaredNorm() <= p_max + 1e-9);
}

}  // namespace

TEST_CASE("wmmse single user is maximum ratio transmission at full power") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        auto h = random_channels(4, 1, rng);
        const double p = rng.uniform(0.5, 4), s2 = rng.uniform(0.1, 2);
        auto sol = wmmse(h, p, s2, 50, 1e-12);
        Eigen::VectorXcd mrt = h.col(0) / h.col(0).norm();
        CHECK((sol.precoders.col(0) - mrt).norm() < 1e-6);
        CHECK(std::abs(sol.powers[0] - p) < 1e-9);
        const double expect = std::log2(1 + p * h.col(0).squaredNorm() / s2);
        CHECK(std::abs(sum_rate_precoded(h, sol.transmit(), s2).total - expect) < 1e-6);
    }
}

TEST_CASE("wmmse objective trace is non-decreasing and the solution feasible") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + static_cast<int>(rng.index(5));
        const int K = 1 + static_cast<int>(rng.index(6));
        auto h = random_channels(n, K, rng);
        auto sol = wmmse(h, 1.0, rng.uniform(0.01, 1.0), 200, 1e-10);
        for (std::size_t i = 1; i < sol.objective_trace.size(); ++i)
            CHECK(sol.objective_trace[i] >= sol.objective_trace[i - 1] - 1e-9);
        double total = 0;
        for (int k = 0; k < K; ++k) {
            CHECK(std::abs(sol.precoders.col(k).norm() - 1.0) < 1e-9);
            CHECK(sol.powers[k] >= 0);
            total += sol.powers[k];
        }
        CHECK(total <= 1.0 + 1e-9);
        auto again = wmmse(h, 1.0, 0.5, 20, 1e-10);
        auto again2 = wmmse(h, 1.0, 0.5, 20, 1e-10);
        CHECK(again.objective_trace == again2.objective_trace);
    }
}

TEST_CASE("wmmse beats the exhaustive codebook oracle on two-user instances") {
    Rng rng(3);
    auto c = make_codebook(4, 8);
    for (int trial = 0; trial < 20; ++trial) {
        auto h = random_channels(4, 2, rng);
        const double s2 = 0.1;
        auto sol = wmmse(h, 1.0, s2, 500, 1e-12);
        auto oracle = exhaustive_oracle(h, c, 1.0, s2);
        CHECK(sol.objective_trace.back() >= oracle.total - 1e-6);
    }
}

TEST_CASE("rss channel estimate") {
    auto c = make_codebook(4, 4);
    const cd alpha(0.6, -0.8);
    Eigen::VectorXcd h = alpha * c.col(2);
    auto est = rss_channel_estimate(rss(h, c), c, 1);
    CHECK((est - std::abs(alpha) * c.col(2)).norm() < 1e-12);
    auto zero = rss_channel_estimate({0, 0, 0, 0}, c, 2);
    CHECK(zero.norm() == 0.0);
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto hr = random_channels(4, 1, rng).col(0);
        auto full = rss_channel_estimate(rss(hr, c), c, 4);
        CHECK(std::abs(full.norm() - hr.norm()) < 1e-9);
    }
}

TEST_CASE("zf sweep") {
    std::vector<double> a(8, 0.1), b(8, 0.2);
    a[3] = 5.0;
    b[7] = 2.0;
    auto t = zf_sweep({a, b}, 8, 2.0);
    CHECK(t(3, 0) == doctest::Approx(1.0));
    CHECK(t(7, 1) == doctest::Approx(1.0));
    CHECK(t.cwiseAbs().sum() == doctest::Approx(2.0));
    auto single = zf_sweep({b}, 8, 3.0);
    CHECK(single(7, 0) == doctest::Approx(std::sqrt(3.0)));
    auto tie = zf_sweep({{1.0, 4.0, 4.0, 0.0}}, 4, 1.0);
    CHECK(tie(1, 0) == 1.0);
    CHECK(tie(2, 0) == 0.0);
    check_feasible_codebook_strategy(t, 2.0);
}

TEST_CASE("exhaustive oracle") {
    Rng rng(5);
    auto c = make_codebook(4, 8);
    SUBCASE("single user reduces to the best beam") {
        for (int trial = 0; trial < 10; ++trial) {
            auto h = random_channels(4, 1, rng);
            auto r = rss(h.col(0), c);
            double best = 0;
            for (double v : r)
                best = std::max(best, std::log2(1 + 2.0 * v / 0.3));
            auto o = exhaustive_oracle(h, c, 2.0, 0.3);
            CHECK(std::abs(o.total - best) < 1e-12);
            check_feasible_codebook_strategy(o.strategy, 2.0);
        }
    }
    SUBCASE("dominates the sweep baseline") {
        for (int trial = 0; trial < 20; ++trial) {
            const int K = 2 + static_cast<int>(rng.index(2));
            auto h = random_channels(4, K, rng);
            std::vector<std::vector<double>> all;
            for (int k = 0; k < K; ++k)
                all.push_back(rss(h.col(k), c));
            auto sweep = zf_sweep(all, 8, 1.0);
            auto o = exhaustive_oracle(h, c, 1.0, 0.05);
            check_feasible_codebook_strategy(o.strategy, 1.0);
            CHECK(o.total >= sum_rate(h, c, sweep, 0.05).total - 1e-12);
        }
    }
    SUBCASE("search size guard") {
        auto h = random_channels(4, 5, rng);
        CHECK_THROWS_AS(exhaustive_oracle(h, c, 1.0, 0.1), ContractViolation);
    }
}

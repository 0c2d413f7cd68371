// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "beamgraph/gba_rsu.hpp"
#include "support.hpp"

using namespace beamgraph;
using namespace beamgraph::rsu;
using beamgraph::tk::DenseArray;
using beamgraph::tk::Tape;
using beamgraph::tk::Var;

namespace {

air::FeedbackMatrix random_feedback(int w, int k, Rng& rng, double p = 0.3) {
    air::FeedbackMatrix v(w, k);
    for (int i = 0; i < w; ++i)
        for (int j = 0; j < k; ++j)
            v(i, j) = rng.bernoulli(p) ? 1 : 0;
    return v;
}

Eigen::MatrixXcd random_g(int k, int w, Rng& rng) {
    Eigen::MatrixXcd g(k, w);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < w; ++j)
            g(i, j) = air::cd(rng.normal(), rng.normal()) * 0.1;
    return g;
}

// Independent rate oracle: direct evaluation of log2(1 + S/(I + sigma2)).
double oracle_sum_rate(const DenseArray& t, const Eigen::MatrixXcd& g, double sigma2) {
    double total = 0;
    for (std::size_t k = 0; k < t.rows(); ++k) {
        double s = 0, inter = 0;
        for (std::size_t i = 0; i < t.rows(); ++i) {
            air::cd a = 0;
            for (std::size_t w = 0; w < t.cols(); ++w)
                a += g(static_cast<int>(k), static_cast<int>(w)) * t(i, w);
            (i == k ? s : inter) += std::norm(a);
        }
        total += std::log2(1 + s / (inter + sigma2));
    }
    return total;
}

DenseArray rows_of(const Eigen::MatrixXd& m) {
    DenseArray a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
            a(r, c) = m(r, c);
    return a;
}

}  // namespace

TEST_CASE("build_graph") {
    air::FeedbackMatrix v = air::FeedbackMatrix::Zero(4, 3);
    v(0, 0) = v(0, 1) = v(1, 2) = 1;
    auto g = build_graph(v);
    CHECK(g.adjacency(0, 1) == 1);
    CHECK(g.adjacency(1, 0) == 1);
    CHECK(g.adjacency.sum() == 2);
    CHECK(g.src == std::vector<std::size_t>{0, 1});
    CHECK(g.dst == std::vector<std::size_t>{1, 0});
    CHECK(g.features(2, 1) == 1.0);

    CHECK(build_graph(air::FeedbackMatrix::Zero(4, 3)).adjacency.sum() == 0);
    air::FeedbackMatrix disjoint = air::FeedbackMatrix::Identity(4, 3);
    CHECK(build_graph(disjoint).adjacency.sum() == 0);

    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto r = random_feedback(6, 5, rng);
        auto gr = build_graph(r);
        Eigen::MatrixXi gram = r.transpose() * r;
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j)
                CHECK(gr.adjacency(i, j) == ((i != j && gram(i, j) >= 1) ? 1 : 0));
    }
    air::FeedbackMatrix bad = air::FeedbackMatrix::Zero(2, 1);
    bad(0, 0) = 2;
    CHECK_THROWS_AS(build_graph(bad), ContractViolation);
}

TEST_CASE("beam_project examples") {
    ProjectionConfig cfg;
    SUBCASE("single column") {
        Tape t;
        auto out = beam_project(t.constant(DenseArray({1, 2}, {-3.0, 1.0})), cfg);
        CHECK(out.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(out.value()(0, 1) == 0.0);
    }
    SUBCASE("zero column is pruned") {
        Tape t;
        auto out = beam_project(t.constant(DenseArray({2, 3}, {0, 0, 0, 0, 2, 0})), cfg);
        CHECK(out.value()(0, 0) == 0.0);
        CHECK(out.value().row(0)[1] == 0.0);
        CHECK(out.value()(1, 1) == doctest::Approx(1.0));
        auto all_zero = beam_project(t.constant(DenseArray({2, 3})), cfg);
        CHECK(all_zero.value().max_abs() == 0.0);
    }
    SUBCASE("small power share is pruned") {
        Tape t;
        const double eps = 1e-4;
        auto out = beam_project(t.constant(DenseArray({2, 2}, {std::sqrt(1 - eps), 0, 0, std::sqrt(eps)})), cfg);
        CHECK(out.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(out.value()(1, 1) == 0.0);
        auto kept = beam_project(t.constant(DenseArray({2, 2}, {std::sqrt(1 - 1e-3), 0, 0, std::sqrt(1e-3)})), cfg);
        CHECK(kept.value()(1, 1) > 0.0);
    }
    SUBCASE("ablation toggles") {
        Tape t;
        ProjectionConfig raw = cfg;
        raw.re_normalization = false;
        auto out = beam_project(t.constant(DenseArray({1, 3}, {-3.0, 1.0, 2.0})), raw);
        CHECK(out.value()(0, 0) == 3.0);
        raw.non_negativity = false;
        auto signed_out = beam_project(t.constant(DenseArray({1, 3}, {-3.0, 1.0, 2.0})), raw);
        CHECK(signed_out.value()(0, 2) == 2.0);
        CHECK(signed_out.value()(0, 0) == 0.0);
    }
    SUBCASE("p_max scaling") {
        Tape t;
        ProjectionConfig c2 = cfg;
        c2.p_max = 4.0;
        auto out = beam_project(t.constant(DenseArray({2, 2}, {1, 0, 0, 1})), c2);
        CHECK(out.value()(0, 0) == doctest::Approx(std::sqrt(2.0)));
        CHECK(out.value()(1, 1) == doctest::Approx(std::sqrt(2.0)));
    }
}

TEST_CASE("soft mask saturates at low temperature") {
    Tape t;
    auto soft = tk::softmax_t(t.constant(DenseArray({4}, {0.3, 0.4, 0.1, 0.2})), 1e-3);
    CHECK(soft.value()[1] > 1 - 1e-6);
}

TEST_CASE("policy feasibility, single vehicle and isolated vertices") {
    Rng rng(2);
    RsuConfig model{.w = 8, .d_g = 16, .hidden = 16};
    auto params = init_rsu_params(model, rng);
    ProjectionConfig cfg;
    for (int trial = 0; trial < 100; ++trial) {
        const int K = 1 + static_cast<int>(rng.index(5));
        auto t = rsu_forward(random_feedback(8, K, rng), params, cfg);
        for (int k = 0; k < K; ++k) {
            int nz = 0;
            for (int w = 0; w < 8; ++w)
                nz += t(w, k) != 0.0;
            CHECK(nz <= 1);
            CHECK((t.col(k).array() >= 0).all());
        }
        const double p = t.squaredNorm();
        CHECK((std::abs(p - cfg.p_max) < 1e-9 || p == 0.0));
    }
    for (int trial = 0; trial < 20; ++trial) {
        air::FeedbackMatrix v = random_feedback(8, 1, rng, 0.5);
        v(static_cast<int>(rng.index(8)), 0) = 1;
        auto t = rsu_forward(v, params, cfg);
        CHECK(t.squaredNorm() == doctest::Approx(cfg.p_max).epsilon(1e-12));
        CHECK((t.array() != 0.0).count() == 1);
    }
    // Two unconnected copies of a vertex get identical columns.
    air::FeedbackMatrix v = air::FeedbackMatrix::Zero(8, 3);
    v(1, 0) = v(2, 0) = 1;
    v(5, 1) = 1;
    v(5, 2) = 1;
    v(6, 2) = 1;
    ProjectionConfig raw = cfg;
    raw.re_normalization = false;
    air::FeedbackMatrix dup(8, 2);
    dup.col(0) = v.col(0);
    dup.col(1) = v.col(0);
    auto a = rsu_forward(dup, params, raw);
    CHECK((a.col(0) - a.col(1)).cwiseAbs().maxCoeff() == 0.0);
    // An isolated vertex's output does not depend on the rest of the graph.
    auto with_others = rsu_forward(v, params, raw);
    air::FeedbackMatrix alone = v.col(0);
    auto single = rsu_forward(alone, params, raw);
    CHECK((with_others.col(0) - single.col(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("permutation equivariance") {
    Rng rng(3);
    RsuConfig model{.w = 8, .d_g = 16, .hidden = 16};
    for (int trial = 0; trial < 30; ++trial) {
        auto params = init_rsu_params(model, rng);
        const int K = 3 + static_cast<int>(rng.index(3));
        auto v = random_feedback(8, K, rng, 0.35);
        auto perm = rng.permutation(static_cast<std::size_t>(K));
        air::FeedbackMatrix vp(8, K);
        for (int j = 0; j < K; ++j)
            vp.col(j) = v.col(static_cast<int>(perm[j]));
        for (bool renorm : {true, false}) {
            ProjectionConfig cfg;
            cfg.re_normalization = renorm;
            auto t = rsu_forward(v, params, cfg);
            auto tp = rsu_forward(vp, params, cfg);
            double err = 0;
            for (int j = 0; j < K; ++j)
                err = std::max(err, (tp.col(j) - t.col(static_cast<int>(perm[j]))).cwiseAbs().maxCoeff());
            CHECK(err < 1e-6);
        }
    }
}

TEST_CASE("rate loss") {
    Rng rng(4);
    SUBCASE("zero strategy gives zero loss") {
        Tape t;
        auto l = rate_loss(t.constant(DenseArray({3, 4})), random_g(3, 4, rng), 1e-3);
        CHECK(l.value()[0] == 0.0);
    }
    SUBCASE("value matches the direct rate formula and airsim") {
        for (int trial = 0; trial < 20; ++trial) {
            const int K = 1 + static_cast<int>(rng.index(4));
            auto g = random_g(K, 6, rng);
            auto tv = testsupport::random_array({static_cast<std::size_t>(K), 6}, rng);
            Tape t;
            auto l = rate_loss(t.constant(tv), g, 0.01);
            CHECK(-l.value()[0] == doctest::Approx(oracle_sum_rate(tv, g, 0.01)).epsilon(1e-12));
            air::Strategy s(6, K);
            for (int k = 0; k < K; ++k)
                for (int w = 0; w < 6; ++w)
                    s(w, k) = tv(k, w);
            CHECK(-l.value()[0] == doctest::Approx(air::sum_rate(g, s, 0.01).total).epsilon(1e-12));
        }
    }
    SUBCASE("gradient matches finite differences") {
        for (int trial = 0; trial < 30; ++trial) {
            const int K = 1 + static_cast<int>(rng.index(4));
            auto g = random_g(K, 5, rng);
            auto f = [g](Tape&, const std::vector<Var>& x) { return user_rates(x[0], g, 0.01); };
            auto err = testsupport::fd_max_rel_error(f, {testsupport::random_array({static_cast<std::size_t>(K), 5}, rng)},
                                                     rng);
            CHECK(err < 1e-5);
        }
    }
    SUBCASE("stronger aligned gain with fixed interference lowers the loss") {
        auto g = random_g(2, 3, rng);
        DenseArray tv({2, 3}, {0.5, 0, 0, 0, 0.5, 0});
        Tape t;
        const double base = rate_loss(t.constant(tv), g, 0.01).value()[0];
        g(0, 0) *= 1.5;  // user 0's own link only; user 1 sees the same interference
        g(1, 0) *= 1.0;
        const double better = rate_loss(t.constant(tv), g, 0.01).value()[0];
        CHECK(better < base);
    }
}

TEST_CASE("policy gradient through the straight-through path matches finite differences") {
    // Oracle: the straight-through gradient is the derivative at theta0 of the
    // surrogate in which the mask is hard0 + soft(theta) - soft(theta0), with
    // hard0, soft(theta0) and the pruning mask frozen at theta0.
    Rng rng(5);
    RsuConfig model{.w = 6, .d_g = 8, .hidden = 8};
    ProjectionConfig cfg;
    cfg.tau = 0.5;
    int checked = 0;
    for (int trial = 0; trial < 10; ++trial) {
        auto params = init_rsu_params(model, rng);
        const int K = 2 + static_cast<int>(rng.index(2));
        air::FeedbackMatrix v = random_feedback(6, K, rng, 0.4);
        const auto graph = build_graph(v);
        auto g = random_g(K, 6, rng);

        params.zero_grad();
        DenseArray hard0, soft0;
        {
            Tape t;
            tk::Binder bind(t, params);
            Var z = rsu_logits(bind, t.constant(graph.features), graph.adjacency);
            auto loss = rate_loss(beam_project(z, cfg), g, 0.01);
            t.backward(loss);
            auto znon = tk::abs(z);
            soft0 = tk::softmax_t(znon, cfg.tau).value();
            hard0 = DenseArray(znon.shape());
            for (std::size_t k = 0; k < znon.value().rows(); ++k) {
                auto row = znon.value().row(k);
                hard0(k, std::max_element(row.begin(), row.end()) - row.begin()) = 1.0;
            }
        }
        auto surrogate_loss = [&](tk::ParameterStore& p) {
            Tape t;
            tk::Binder bind(t, p, true);
            Var znon = tk::abs(rsu_logits(bind, t.constant(graph.features), graph.adjacency));
            Var mix = tk::add(t.constant(hard0), tk::sub(tk::softmax_t(znon, cfg.tau), t.constant(soft0)));
            Var zhat = tk::mul(znon, mix);
            Var inv = tk::pow_scalar(tk::sum(tk::square(zhat)), -0.5);
            return rate_loss(tk::mul_scalar(zhat, inv), g, 0.01).value()[0];
        };
        // Skip instances where pruning is active; the surrogate above omits the mask.
        {
            Tape t;
            tk::Binder bind(t, params, true);
            auto z = rsu_logits(bind, t.constant(graph.features), graph.adjacency);
            ProjectionConfig none = cfg;
            none.prune_fraction = 0;
            auto a = beam_project(z, cfg).value();
            auto b = beam_project(z, none).value();
            if (!(a == b))
                continue;
        }
        ++checked;
        for (const std::string name : {"rsu/proj/l1/w", "rsu/proj/l1/b", "rsu/edge/l0/w"}) {
            auto& entry = params.at(name);
            double worst = 0;
            for (std::size_t i = 0; i < entry.value.size(); ++i) {
                const double keep = entry.value.values()[i];
                const double h = 1e-6;
                entry.value.values()[i] = keep + h;
                const double up = surrogate_loss(params);
                entry.value.values()[i] = keep - h;
                const double down = surrogate_loss(params);
                entry.value.values()[i] = keep;
                const double num = (up - down) / (2 * h);
                const double ana = entry.grad.values()[i];
                worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-4}));
            }
            CAPTURE(name);
            CHECK(worst < 1e-3);
        }
    }
    CHECK(checked >= 5);
}

TEST_CASE("perturbation") {
    Rng rng(6);
    Snapshot s{random_feedback(8, 4, rng), random_g(4, 8, rng)};
    SUBCASE("identity without dropping or errors") {
        for (int i = 0; i < 20; ++i) {
            auto p = perturb(s, 0.0, 0.0, rng);
            CHECK(p.v == s.v);
            CHECK(p.g == s.g);
        }
    }
    SUBCASE("xor with the error mask") {
        air::FeedbackMatrix v(3, 1);
        v << 1, 0, 1;
        air::FeedbackMatrix e(3, 1);
        e << 0, 1, 0;
        air::FeedbackMatrix x = v.array().max(e.array()) - v.array().min(e.array());
        CHECK(x == air::FeedbackMatrix::Ones(3, 1));
        // p_error just below 1 flips almost every bit.
        Snapshot one{v, random_g(1, 3, rng)};
        int flipped = 0;
        for (int i = 0; i < 200; ++i)
            flipped += (perturb(one, 0.0, 0.999, rng).v.array() != v.array()).count();
        CHECK(flipped > 590);
    }
    SUBCASE("dropping removes whole vehicles") {
        int dropped = 0;
        for (int i = 0; i < 1000; ++i) {
            auto p = perturb(s, 0.25, 0.0, rng);
            dropped += 4 - static_cast<int>(p.v.cols());
            CHECK(p.g.rows() == p.v.cols());
            // Surviving columns keep their order and pair with their channel rows.
            int j = 0;
            for (int k = 0; k < 4 && j < p.v.cols(); ++k)
                if (p.g.row(j) == s.g.row(k)) {
                    CHECK(p.v.col(j) == s.v.col(k));
                    ++j;
                }
            CHECK(j == p.v.cols());
        }
        CHECK(std::abs(dropped / 4000.0 - 0.25) < 0.03);
    }
    CHECK_THROWS_AS(perturb(s, 1.0, 0.0, rng), ContractViolation);
    CHECK_THROWS_AS(perturb(s, 0.0, -0.1, rng), ContractViolation);
}

TEST_CASE("stage 1 training lowers the loss") {
    air::ScenarioConfig c;
    c.n_t = 4;
    c.w = 8;
    c.n_vehicles = 3;
    c.n_obstacles = 2;
    c.timesteps = 60;
    auto data = snapshots_from(air::make_scenario(c, 11));
    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    tc.sigma2 = c.sigma2;
    auto res = train_stage1(data, {.w = 8, .d_g = 16, .hidden = 16}, tc, 7);
    REQUIRE(res.trace.size() == 60);
    auto smooth = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 5; ++i)
            s += res.trace[i].loss;
        return s / 5;
    };
    const double first = smooth(0), last = smooth(55);
    MESSAGE("smoothed loss " << first << " -> " << last);
    CHECK((first - last) / std::abs(first) >= 0.2);
    CHECK(res.trace.back().sum_rate > res.trace.front().sum_rate);

    auto again = train_stage1(data, {.w = 8, .d_g = 16, .hidden = 16}, tc, 7);
    CHECK(again.params == res.params);
    CHECK_THROWS_AS(train_stage1({}, {}, tc, 1), ContractViolation);

    TrainConfig t3 = tc;
    t3.epochs = 2;
    t3.p_error = 0.2;
    auto r3 = retrain_stage3(data, data, res.params, t3, 9);
    CHECK(r3.trace.size() == 2);
}

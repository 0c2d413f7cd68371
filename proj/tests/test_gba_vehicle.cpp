// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "beamgraph/gba_vehicle.hpp"
#include "support.hpp"

using namespace beamgraph;
using namespace beamgraph::veh;
using beamgraph::tk::BnMode;
using beamgraph::tk::DenseArray;
using beamgraph::tk::Tape;
using testsupport::pointers;
using testsupport::toy_samples;
using testsupport::ToySpec;

namespace {

VehicleConfig toy_config(const ToySpec& spec) {
    VehicleConfig c;
    c.w = spec.w;
    c.input = spec.dims;
    c.latent = {6, 6, 8};
    c.enc_hidden = 8;
    c.fuse_hidden = 8;
    return c;
}

void perturb_prefix(tk::ParameterStore& s, const std::string& prefix, Rng& rng) {
    for (auto& [name, p] : s)
        if (tk::starts_with(name, prefix))
            for (auto& v : p.value.values())
                v += rng.normal();
}

}  // namespace

TEST_CASE("encoder") {
    ToySpec spec;
    auto cfg = toy_config(spec);
    Rng rng(1);
    auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
    auto data = toy_samples(spec, 12, rng);
    const auto batch = make_batch(pointers(data), ModalitySet::all(), cfg);
    for (int q = 0; q < 3; ++q) {
        Tape t;
        tk::Binder bind(t, params, true);
        auto a = encode(bind, cfg, q, t.constant(batch.x[q]), BnMode::eval).out.value();
        auto b = encode(bind, cfg, q, t.constant(batch.x[q]), BnMode::eval).out.value();
        CHECK(a == b);
        CHECK(a.cols() == static_cast<std::size_t>(cfg.latent[q]));
        CHECK(a.rows() == 12);
    }
    auto g_only = init_vehicle_params(cfg, ModalitySet::only(air::kGps), rng);
    Tape t;
    tk::Binder bind(t, g_only, true);
    CHECK_THROWS_AS(encode(bind, cfg, air::kLidar, t.constant(batch.x[2]), BnMode::eval), ContractViolation);
}

TEST_CASE("encoder and fusion gradients match finite differences") {
    ToySpec spec;
    spec.dims = {2, 3, 4};
    auto cfg = toy_config(spec);
    cfg.latent = {3, 3, 3};
    cfg.enc_hidden = 4;
    cfg.fuse_hidden = 4;
    for (int seed = 0; seed < 5; ++seed) {
        Rng rng(10 + seed);
        auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
        auto data = toy_samples(spec, 6, rng);
        const auto batch = make_batch(pointers(data), ModalitySet::all(), cfg);
        for (auto mode : {BnMode::train, BnMode::eval}) {
            auto loss = [&](tk::ParameterStore& s, bool grad) {
                Tape t;
                tk::Binder bind(t, s, !grad);
                auto f = forward(bind, cfg, batch, ModalitySet::all(), mode);
                auto l = tk::bce(batch.labels, f.probs);
                if (grad)
                    t.backward(l);
                return l.value()[0];
            };
            const double err = testsupport::param_fd_max_rel_error(
                params, {"enc_G/l0/w", "enc_R/bn/gamma", "enc_L/bn/beta", "enc_L/l1/w", "fuse/R/b", "fuse/out/w"},
                loss);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("fusion prediction") {
    ToySpec spec;
    auto cfg = toy_config(spec);
    Rng rng(2);
    auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
    auto data = toy_samples(spec, 10, rng);
    auto ptrs = pointers(data);

    SUBCASE("pruned full set equals the unpruned model bitwise") {
        auto pruned = prune_for(ModalitySet::all(), params, cfg);
        CHECK(predict(pruned, ptrs) == predict(params, cfg, ptrs, ModalitySet::all()));
        CHECK(pruned.pruned_scalars == pruned.full_scalars);
    }
    SUBCASE("single-modality prediction ignores the other branches") {
        const auto g = ModalitySet::only(air::kGps);
        auto before = predict(params, cfg, ptrs, g);
        auto changed = params;
        perturb_prefix(changed, "enc_R/", rng);
        perturb_prefix(changed, "enc_L/", rng);
        perturb_prefix(changed, "fuse/R/", rng);
        perturb_prefix(changed, "fuse/L/", rng);
        CHECK(predict(changed, cfg, ptrs, g) == before);
        auto gl = prune_for(ModalitySet::parse("GL"), params, cfg);
        auto gl_before = predict(gl, ptrs);
        perturb_prefix(gl.params, "fuse/R/", rng);  // absent from the pruned model: no-op
        auto changed_full = params;
        perturb_prefix(changed_full, "fuse/R/", rng);
        CHECK(predict(changed_full, cfg, ptrs, ModalitySet::parse("GL")) == gl_before);
    }
    SUBCASE("zero features with zero biases give one half") {
        auto zeroed = params;
        for (auto& [name, p] : zeroed)
            if (name.ends_with("/b"))
                p.value.fill(0.0);
        auto zeros = data;
        for (auto& s : zeros)
            for (int q = 0; q < 3; ++q)
                std::fill(s.feature(q).begin(), s.feature(q).end(), 0.0);
        auto p = predict(zeroed, cfg, pointers(zeros), ModalitySet::all());
        for (double v : p.values())
            CHECK(v == 0.5);
    }
    SUBCASE("fusion blocks add up") {
        // The pre-activation over a set is the sum of the per-modality blocks, each with its own bias.
        const auto batch = make_batch(ptrs, ModalitySet::all(), cfg);
        Tape t;
        tk::Binder bind(t, params, true);
        auto full = forward(bind, cfg, batch, ModalitySet::all(), BnMode::eval).fused.value();
        DenseArray sum(full.shape());
        for (int q = 0; q < 3; ++q)
            sum += forward(bind, cfg, batch, ModalitySet::only(q), BnMode::eval).fused.value();
        for (std::size_t i = 0; i < full.size(); ++i)
            CHECK(full[i] == doctest::Approx(sum[i]).epsilon(1e-12));
        // Removing one block changes the sum by exactly that block.
        auto without_r = forward(bind, cfg, batch, ModalitySet::parse("GL"), BnMode::eval).fused.value();
        auto r_only = forward(bind, cfg, batch, ModalitySet::only(air::kRgb), BnMode::eval).fused.value();
        for (std::size_t i = 0; i < full.size(); ++i)
            CHECK(full[i] - without_r[i] == doctest::Approx(r_only[i]).epsilon(1e-12));
    }
    SUBCASE("samples missing a modality use the remaining blocks") {
        auto partial = data;
        partial[0].available[air::kLidar] = false;
        auto p = predict(params, cfg, pointers(partial), ModalitySet::all());
        auto gr = predict(params, cfg, {&partial[0]}, ModalitySet::parse("GR"));
        for (int w = 0; w < cfg.w; ++w)
            CHECK(p(0, w) == gr(0, w));
    }
    CHECK_THROWS_AS(prune_for(ModalitySet{}, params, cfg), ContractViolation);
}

TEST_CASE("pruning parameter counts") {
    VehicleConfig cfg;  // L = 16/16/32
    Rng rng(3);
    auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
    auto g = prune_for(ModalitySet::only(air::kGps), params, cfg);
    std::size_t fusion_cols_full = 0, fusion_cols_g = 0;
    for (const auto& [name, p] : params)
        if (name.starts_with("fuse/") && !name.starts_with("fuse/out") && name.ends_with("/w"))
            fusion_cols_full += p.value.cols();
    for (const auto& [name, p] : g.params)
        if (name.starts_with("fuse/") && !name.starts_with("fuse/out") && name.ends_with("/w"))
            fusion_cols_g += p.value.cols();
    CHECK(fusion_cols_full == 16 + 16 + 32);
    CHECK(fusion_cols_g == 16);
    CHECK(g.pruned_scalars < g.full_scalars);
    CHECK(g.pruned_scalars == g.params.scalar_count());
}

TEST_CASE("bce") {
    Tape t;
    DenseArray v({2}, {1.0, 0.0});
    CHECK(tk::bce(v, t.constant(DenseArray({2}, {0.5, 0.5}))).value()[0] ==
          doctest::Approx(2 * std::numbers::ln2).epsilon(1e-12));
    CHECK(tk::bce(v, t.constant(DenseArray({2}, {1 - tk::kProbFloor, tk::kProbFloor}))).value()[0] < 1e-5);
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        DenseArray lab({5});
        for (auto& x : lab.values())
            x = rng.bernoulli(0.5) ? 1.0 : 0.0;
        CHECK(tk::bce(lab, t.constant(testsupport::random_array({5}, rng, 0.0, 1.0))).value()[0] >= 0.0);
    }
    auto f = [](Tape& tape, const std::vector<tk::Var>& x) {
        DenseArray lab({2, 3}, {1, 0, 1, 0, 0, 1});
        (void)tape;
        return tk::bce(lab, x[0]);
    };
    CHECK(testsupport::fd_max_rel_error(f, {testsupport::random_array({2, 3}, rng, 0.1, 0.9)}, rng) < 1e-4);
}

TEST_CASE("accuracy") {
    std::vector<double> p{0.9, 0.8, 0.1, 0.2};
    std::vector<int> v{1, 1, 0, 0};
    auto a = accuracy(p, v);
    CHECK(a.exact == 1.0);
    CHECK(a.f1 == 1.0);
    std::vector<double> comp{0.1, 0.2, 0.9, 0.8};
    CHECK(accuracy(comp, v).exact == 0.0);
    std::vector<double> half{0.9, 0.1, 0.1, 0.1};
    auto h = accuracy(half, v);
    CHECK(h.exact == 0.0);
    CHECK(h.precision == 1.0);
    CHECK(h.recall == 0.5);
    CHECK(h.f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("local epoch") {
    ToySpec spec;
    auto cfg = toy_config(spec);
    const auto gl = ModalitySet::parse("GL");
    SUBCASE("unowned branches stay bitwise unchanged and batches are counted") {
        Rng rng(5);
        auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
        auto data = toy_samples(spec, 70, rng);
        auto before = params;
        tk::AdamW opt({.lr = 1e-2, .weight_decay = 1e-2});
        Rng shuffle(6);
        auto st = local_epoch(params, cfg, pointers(data), gl, {.lr = 1e-2, .batch_size = 32}, opt, shuffle);
        CHECK(st.batches == 3);
        for (const auto& [name, p] : params) {
            const bool r_branch = name.starts_with("enc_R/") || name.starts_with("fuse/R/");
            if (r_branch)
                CHECK(p.value == before.at(name).value);
        }
        CHECK(!(params.at("enc_L/l0/w").value == before.at("enc_L/l0/w").value));
        CHECK(!(params.at("enc_G/bn/running_mean").value == before.at("enc_G/bn/running_mean").value));
    }
    SUBCASE("an all-ones mask hook reproduces plain training bitwise") {
        Rng rng(7);
        auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
        auto data = toy_samples(spec, 50, rng);
        auto a = params, b = params;
        tk::AdamW oa, ob;
        Rng sa(8), sb(8);
        int calls = 0;
        MinibatchHook hook{[](const Batch&) { return kKeepAll; }, [&](const Batch&, tk::ParameterStore&) { ++calls; }};
        for (int e = 0; e < 3; ++e) {
            local_epoch(a, cfg, pointers(data), ModalitySet::all(), {}, oa, sa);
            local_epoch(b, cfg, pointers(data), ModalitySet::all(), {}, ob, sb, &hook);
        }
        CHECK(a == b);
        CHECK(calls == 6);
    }
    SUBCASE("loss decreases over five epochs on a 200-sample toy set") {
        int improved = 0;
        const int seeds = 10;
        for (int seed = 0; seed < seeds; ++seed) {
            Rng rng(100 + seed);
            auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
            auto data = toy_samples(spec, 200, rng);
            tk::AdamW opt({.lr = 1e-2, .weight_decay = 0});
            std::vector<double> losses;
            for (int e = 0; e < 5; ++e)
                losses.push_back(
                    local_epoch(params, cfg, pointers(data), ModalitySet::all(), {.lr = 1e-2}, opt, rng).loss);
            improved += losses.back() < losses.front();
        }
        CHECK(improved >= 9);
    }
    SUBCASE("decision-layer scope with frozen statistics") {
        Rng rng(9);
        auto params = init_vehicle_params(cfg, ModalitySet::all(), rng);
        auto data = toy_samples(spec, 40, rng);
        auto before = params;
        tk::AdamW opt;
        local_epoch(params, cfg, pointers(data), ModalitySet::all(), {.bn_mode = BnMode::eval}, opt, rng, nullptr,
                    is_decision_layer);
        for (const auto& [name, p] : params) {
            if (!is_decision_layer(name))
                CHECK(p.value == before.at(name).value);
        }
        CHECK(!(params.at("enc_L/l1/w").value == before.at("enc_L/l1/w").value));
    }
    CHECK_THROWS_AS(
        [] {
            tk::ParameterStore p;
            tk::AdamW o;
            Rng r(1);
            local_epoch(p, {}, {}, ModalitySet::all(), {}, o, r);
        }(),
        ContractViolation);
}

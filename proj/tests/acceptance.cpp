// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Arguments select a subset by number (default: all).
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "beamgraph/balance.hpp"
#include "beamgraph/baselines.hpp"
#include "beamgraph/verify.hpp"
#include "support.hpp"

using namespace beamgraph;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

Outcome from_suite(const verify::SuiteResult& r, int want_trials) {
    Outcome o;
    o.pass = r.pass && r.trials >= want_trials;
    o.detail = verify::format(r);
    return o;
}

std::vector<rsu::Snapshot> truth_snapshots(const air::Dataset& d, const std::vector<int>& ts) {
    std::vector<rsu::Snapshot> out;
    for (int t : ts)
        out.push_back({d.feedback_at(t), air::beam_domain(d.channels_at(t), d.codebook)});
    return out;
}

// Small stage-1 RSU used by the federated criteria.
tk::ParameterStore quick_rsu(const air::Dataset& d, const std::vector<int>& ts, std::uint64_t seed) {
    rsu::TrainConfig tc;
    tc.epochs = 20;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    tc.sigma2 = d.scenario.cfg.sigma2;
    return rsu::train_stage1(truth_snapshots(d, ts), {.w = d.scenario.cfg.w, .d_g = 16, .hidden = 16}, tc, seed)
        .params;
}

// ---------------------------------------------------------------------------
// 1-5: property suites

Outcome c1() { return from_suite(verify::prop1(101, 100), 100); }

Outcome c2() {
    // random parameters per trial, then one trained policy
    const auto random = verify::prop2(102, 100);
    air::ScenarioConfig sc;
    sc.n_vehicles = 4;
    sc.timesteps = 40;
    sc.seed = 7;
    const auto d = air::make_scenario(sc);
    rsu::TrainConfig tc;
    tc.epochs = 5;
    tc.sigma2 = sc.sigma2;
    auto trained_params = rsu::train_stage1(rsu::snapshots_from(d), {.w = sc.w, .d_g = 32, .hidden = 32}, tc, 3).params;
    const auto trained = verify::prop2(103, 100, 1e-6, &trained_params);
    Outcome o;
    o.pass = random.pass && trained.pass && random.trials >= 100 && trained.trials >= 100;
    o.detail = "random params: " + verify::format(random) + "; trained params: " + verify::format(trained);
    return o;
}

Outcome c3() { return from_suite(verify::prop3(104, 100), 100); }
Outcome c4() { return from_suite(verify::gradients(105, 20), 20); }
Outcome c5() { return from_suite(verify::constraints(106, 1000), 1000); }

// ---------------------------------------------------------------------------
// 6: stage-1 policy against the exhaustive oracle

Outcome c6() {
    constexpr int kScenarios = 20;
    std::vector<air::Dataset> ds;
    std::vector<rsu::Snapshot> pool;
    std::vector<double> oracle;
    for (int s = 0; s < kScenarios; ++s) {
        air::ScenarioConfig c;
        c.n_vehicles = 2;
        c.n_t = 4;
        c.w = 8;
        c.timesteps = 50;
        c.seed = 1000 + static_cast<std::uint64_t>(s);
        ds.push_back(air::make_scenario(c));
        const auto sn = rsu::snapshots_from(ds.back());
        pool.insert(pool.end(), sn.begin(), sn.end());
        double total = 0.0;
        for (int t = 0; t < c.timesteps; ++t)
            total += base::exhaustive_oracle(ds.back().channels_at(t), ds.back().codebook, c.p_max, c.sigma2).total;
        oracle.push_back(total / c.timesteps);
    }
    std::vector<double> per_seed;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        rsu::TrainConfig tc;
        tc.epochs = 30;
        tc.p_drop = 0.0;  // ground-truth feedback throughout
        tc.sigma2 = ds.front().scenario.cfg.sigma2;
        auto r = rsu::train_stage1(pool, {.w = 8, .d_g = 32, .hidden = 32}, tc, seed);
        double ratio = 0.0;
        for (int s = 0; s < kScenarios; ++s)
            ratio += rsu::mean_sum_rate(rsu::snapshots_from(ds[s]), r.params, tc.projection, tc.sigma2) / oracle[s];
        per_seed.push_back(ratio / kScenarios);
    }
    const double mean = (per_seed[0] + per_seed[1] + per_seed[2]) / 3.0;
    Outcome o;
    o.pass = mean >= 0.90;
    o.detail = "GBA/oracle sum-rate ratio " + fmt(mean) + " (seeds " + fmt(per_seed[0]) + ", " + fmt(per_seed[1]) +
               ", " + fmt(per_seed[2]) + "; bar 0.90)";
    return o;
}

// ---------------------------------------------------------------------------
// 7: projection and dropping ablations

Outcome c7() {
    auto make = [](int k, std::uint64_t seed) {
        air::ScenarioConfig c;
        c.n_vehicles = k;
        c.n_t = 8;
        c.w = 8;
        c.timesteps = 50;
        c.seed = seed;
        return rsu::snapshots_from(air::make_scenario(c));
    };
    std::vector<rsu::Snapshot> train;
    for (int i = 0; i < 10; ++i) {
        const auto s = make(1 + i % 6, 2000 + static_cast<std::uint64_t>(i));
        train.insert(train.end(), s.begin(), s.end());
    }
    std::map<int, std::vector<rsu::Snapshot>> test;
    for (int k = 2; k <= 6; ++k)
        for (int i = 0; i < 3; ++i) {
            const auto s = make(k, 3000 + 10 * static_cast<std::uint64_t>(k) + static_cast<std::uint64_t>(i));
            test[k].insert(test[k].end(), s.begin(), s.end());
        }
    struct Variant {
        const char* name;
        bool nonneg;
        bool renorm;
        double p_drop;
    };
    const std::vector<Variant> variants = {{"full", true, true, 0.25},
                                           {"renorm-only", false, true, 0.25},
                                           {"nonneg-only", true, false, 0.25},
                                           {"neither", false, false, 0.25},
                                           {"no-dropping", true, true, 0.0}};
    std::map<std::string, std::map<int, double>> rate;
    for (const auto& v : variants)
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            rsu::TrainConfig tc;
            tc.epochs = 20;
            tc.p_drop = v.p_drop;
            tc.projection.non_negativity = v.nonneg;
            tc.projection.re_normalization = v.renorm;
            auto r = rsu::train_stage1(train, {.w = 8, .d_g = 32, .hidden = 32}, tc, seed);
            for (const auto& [k, ts] : test)
                rate[v.name][k] += rsu::mean_sum_rate(ts, r.params, tc.projection, tc.sigma2) / 3.0;
        }
    Outcome o;
    o.pass = true;
    std::ostringstream os;
    auto order = [&](const std::string& hi, const std::string& lo, int k) {
        const bool ok = rate[hi][k] >= 0.99 * rate[lo][k];
        if (!ok)
            os << " violated: K=" << k << ' ' << hi << ' ' << fmt(rate[hi][k]) << " < " << lo << ' '
               << fmt(rate[lo][k]) << ';';
        o.pass = o.pass && ok;
    };
    for (int k = 2; k <= 6; ++k) {
        order("full", "renorm-only", k);
        order("renorm-only", "nonneg-only", k);
        order("nonneg-only", "neither", k);
    }
    for (int k = 4; k <= 6; ++k)
        order("full", "no-dropping", k);
    std::ostringstream table;
    for (const auto& v : variants) {
        table << ' ' << v.name << '[';
        for (int k = 2; k <= 6; ++k)
            table << (k > 2 ? " " : "") << fmt(rate[v.name][k], 3);
        table << ']';
    }
    o.detail = "3-seed mean sum rate for K=2..6:" + table.str() + os.str();
    return o;
}

// ---------------------------------------------------------------------------
// 8 and 11: imbalanced federated scenario

struct ImbalanceRun {
    double zeta = 0.0;
    double kappa_r = 0.0;
    double kappa_l = 0.0;
    double fedavg = 0.0;
    double ub = 0.0;
    double da = 0.0;
    bal::DaPlusReport da_plus;
};

std::vector<ImbalanceRun>& imbalance_runs() {
    static std::vector<ImbalanceRun> runs;
    if (!runs.empty())
        return runs;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        air::ScenarioConfig sc;
        sc.n_vehicles = 4;
        sc.timesteps = 200;
        sc.trajectory = "segmented";
        sc.n_t = 8;
        sc.gamma = 0.3;
        sc.lanes = 2;
        sc.speed = 0.5;
        sc.availability_rates = {1.0, 0.8, 0.8};
        const auto d = air::make_scenario(sc, 200);
        const auto split = fed::split_timesteps(sc.timesteps, 0.8, 0);
        const auto clients = fed::make_clients(d, split);
        const auto rep = bal::imbalance_report(clients);
        const auto vcfg = veh::vehicle_config_for(sc);
        auto rsu_params = quick_rsu(d, split.train_t, seed);
        Rng rng(seed);
        const auto init = veh::init_vehicle_params(vcfg, air::ModalitySet::all(), rng);
        fed::FlConfig fl;
        fl.rounds = 10;
        fl.local_epochs = 3;
        fl.local = {.lr = 3e-3, .batch_size = 16};

        ImbalanceRun run;
        run.zeta = rep.zeta;
        run.kappa_r = rep.kappa.global[air::kRgb];
        run.kappa_l = rep.kappa.global[air::kLidar];
        run.fedavg = fed::test_accuracy(clients, fed::run_fl(clients, init, vcfg, fl, seed).global, vcfg).exact;
        run.ub = fed::test_accuracy(clients, fed::run_ub(clients, init, vcfg, fl.rounds * fl.local_epochs, fl.local, seed).params,
                                    vcfg)
                     .exact;
        bal::DaMinusConfig dc;
        dc.sigma2 = sc.sigma2;
        bal::DaMinus da_minus(d, rsu_params, clients, vcfg, fl, dc, seed);
        const auto stage2 = fed::run_fl(clients, init, vcfg, fl, seed, da_minus.factory());
        const auto mixed = bal::augment_clients(clients, d, stage2.global, vcfg, rsu_params, {}, sc.sigma2, {}, seed,
                                                &run.da_plus);
        auto ft = fl;
        ft.rounds = 5;
        run.da = fed::test_accuracy(clients, bal::da_plus_finetune(mixed, stage2.global, vcfg, ft, seed).global, vcfg)
                     .exact;
        runs.push_back(run);
    }
    return runs;
}

Outcome c8() {
    const auto& runs = imbalance_runs();
    double fedavg = 0, ub = 0, da = 0, zeta = 0, kr = 0, kl = 0;
    for (const auto& r : runs) {
        fedavg += r.fedavg / 3;
        ub += r.ub / 3;
        da += r.da / 3;
        zeta = std::max(zeta, r.zeta);
        kr += r.kappa_r / 3;
        kl += r.kappa_l / 3;
    }
    Outcome o;
    const bool scenario_ok = zeta <= 0.05 && std::abs(kr - 0.8) <= 0.05 && std::abs(kl - 0.8) <= 0.05;
    o.pass = scenario_ok && ub >= da && da >= fedavg && da - fedavg >= 0.03;
    o.detail = "exact match UB " + fmt(ub) + ", DA " + fmt(da) + ", FedAvg " + fmt(fedavg) + " (DA-FedAvg " +
               fmt(100 * (da - fedavg), 3) + " pp); max zeta " + fmt(zeta) + ", kappa R/L " + fmt(kr, 3) + "/" +
               fmt(kl, 3);
    return o;
}

// ---------------------------------------------------------------------------
// 9: overhead arithmetic

Outcome c9() {
    const auto rows = air::overhead_table({});
    Outcome o;
    if (rows.size() != 3) {
        o.detail = "expected three schemes";
        return o;
    }
    const auto& ce = rows[0];
    const auto& sweep = rows[1];
    const auto& gba = rows[2];
    const double delay_cut = (ce.delay_s - gba.delay_s) / ce.delay_s;
    const double bits_cut = static_cast<double>(ce.bits - gba.bits) / ce.bits;
    const bool bits_ok = ce.bits == 442 && sweep.bits == 6 && gba.bits == 34;
    const bool fraction_ok = std::abs(ce.period_fraction - 0.32) < 0.01 && std::abs(sweep.period_fraction - 0.32) < 0.01 &&
                             std::abs(gba.period_fraction - 0.02) < 0.01;
    o.pass = bits_ok && fraction_ok && delay_cut >= 0.95 && bits_cut >= 0.90;
    o.detail = "bits " + std::to_string(ce.bits) + "/" + std::to_string(sweep.bits) + "/" + std::to_string(gba.bits) +
               ", delay reduction " + fmt(100 * delay_cut, 4) + "%, period fractions " +
               fmt(100 * ce.period_fraction, 3) + "/" + fmt(100 * sweep.period_fraction, 3) + "/" +
               fmt(100 * gba.period_fraction, 3) + "%, bits reduction " + fmt(100 * bits_cut, 4) + "%";
    return o;
}

// ---------------------------------------------------------------------------
// 10: DA- on a scripted two-modality toy

Outcome c10() {
    int decreased = 0;
    int min_kept = air::kModalities;
    std::ostringstream os;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        air::ScenarioConfig sc;
        sc.n_vehicles = 2;
        sc.timesteps = 200;
        sc.d_r = 8;
        sc.d_l = 8;
        sc.modality_sets = {air::ModalitySet::all()};
        auto d = air::make_scenario(sc, 100 + seed);
        testsupport::script_features(d, {0.0, 1.0, 4.0}, 17 + seed);  // LiDAR 4x more informative than RGB
        const auto split = fed::split_timesteps(sc.timesteps, 0.8, seed);
        auto clients = fed::make_clients(d, split);
        for (auto& c : clients)
            c.set = air::ModalitySet::parse("RL");
        const auto vcfg = veh::vehicle_config_for(sc);
        auto rsu_params = quick_rsu(d, split.train_t, seed);
        Rng rng(seed);
        const auto init = veh::init_vehicle_params(vcfg, air::ModalitySet::all(), rng);
        fed::FlConfig fl;
        fl.rounds = 6;
        fl.local_epochs = 5;
        fl.local = {.lr = 1e-2, .batch_size = 16};
        bal::DaMinusConfig dc;
        dc.sigma2 = sc.sigma2;
        bal::DaMinus dm(d, rsu_params, clients, vcfg, fl, dc, seed);
        fed::run_fl(clients, init, vcfg, fl, seed, dm.factory());
        const auto dev = dm.mean_deviation_by_epoch();
        decreased += dev.size() >= 30 && dev[29] < dev[0];
        for (const auto& r : dm.log())
            min_kept = std::min(min_kept, r.min_kept);
        os << (seed ? ", " : "") << fmt(dev.front(), 3) << " -> " << fmt(dev.size() >= 30 ? dev[29] : NAN, 3);
    }
    Outcome o;
    o.pass = decreased >= 2 && min_kept >= 1;
    o.detail = "mean |1-phi| epoch 1 -> 30: " + os.str() + "; decreased in " + std::to_string(decreased) +
               "/3 seeds; fewest modalities kept " + std::to_string(min_kept);
    return o;
}

// ---------------------------------------------------------------------------
// 11: DA+ overlap and batch-statistic repair

Outcome c11() {
    int zeta_ok = 0;
    std::ostringstream os;
    const auto& runs = imbalance_runs();
    for (const auto& r : runs) {
        zeta_ok += r.da_plus.zeta_after >= r.da_plus.zeta_before;
        os << ' ' << fmt(r.da_plus.zeta_before, 3) << "->" << fmt(r.da_plus.zeta_after, 3);
    }

    // single-BN toy: GPS-only model with one batch-norm stage
    testsupport::ToySpec spec;
    spec.strength = {3.0, 3.0, 3.0};
    veh::VehicleConfig cfg;
    cfg.w = spec.w;
    cfg.input = spec.dims;
    cfg.latent = {6, 6, 8};
    cfg.enc_hidden = 8;
    cfg.fuse_hidden = 8;
    const auto g = air::ModalitySet::only(air::kGps);
    int gen_ok = 0;
    double worst = INFINITY;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(seed);
        auto p = veh::init_vehicle_params(cfg, g, rng);
        const auto data = testsupport::toy_samples(spec, 96, rng);
        tk::AdamW opt({.lr = 3e-3});
        Rng shuffle(seed);
        for (int e = 0; e < 10; ++e)
            veh::local_epoch(p, cfg, testsupport::pointers(data), g, {.lr = 3e-3}, opt, shuffle);
        bal::GenerateConfig gc;
        gc.steps = 500;
        const auto sb = bal::generate(p, cfg, g, {1, 0, 0, 0}, gc, seed);
        const double factor = sb.initial_mean_gap / std::max(sb.final_mean_gap, 1e-300);
        worst = std::min(worst, factor);
        gen_ok += factor >= 10.0;
    }
    Outcome o;
    o.pass = zeta_ok == static_cast<int>(runs.size()) && gen_ok == 3;
    o.detail = "zeta before->after" + os.str() + " (" + std::to_string(zeta_ok) + "/" + std::to_string(runs.size()) +
               " non-decreasing); generation mean-gap reduction worst " + fmt(worst, 3) + "x over 3 seeds";
    return o;
}

// ---------------------------------------------------------------------------
// 12: pruned deployment

Outcome c12() {
    air::ScenarioConfig sc;
    sc.n_vehicles = 3;
    sc.timesteps = 30;
    const auto d = air::make_scenario(sc, 12);
    const auto vcfg = veh::vehicle_config_for(sc);
    std::vector<const air::ModalitySample*> samples;
    for (const auto& stream : d.streams)
        for (const auto& s : stream)
            samples.push_back(&s);
    const std::vector<std::string> prefixes[air::kModalities] = {
        {"enc_G/", "fuse/G/"}, {"enc_R/", "fuse/R/"}, {"enc_L/", "fuse/L/"}};

    int checks = 0, failures = 0;
    bool bitwise = true;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const auto params = veh::init_vehicle_params(vcfg, air::ModalitySet::all(), rng);
        auto full = veh::prune_for(air::ModalitySet::all(), params, vcfg);
        auto unpruned = params;
        bitwise = bitwise && veh::predict(full, samples) == veh::predict(unpruned, vcfg, samples, air::ModalitySet::all());

        for (std::uint8_t bits = 1; bits < 8; ++bits) {
            const air::ModalitySet set{bits};
            auto pruned = veh::prune_for(set, params, vcfg);
            const auto reference = veh::predict(pruned, samples);
            // absent-modality parameter blocks of the full model
            auto changed = params;
            for (int q = 0; q < air::kModalities; ++q)
                if (!set.has(q))
                    for (auto& [name, p] : changed)
                        for (const auto& prefix : prefixes[q])
                            if (tk::starts_with(name, prefix))
                                for (auto& v : p.value.values())
                                    v += rng.normal();
            auto repruned = veh::prune_for(set, changed, vcfg);
            failures += !(veh::predict(repruned, samples) == reference);
            failures += !(veh::predict(changed, vcfg, samples, set) == reference);
            // absent-modality input blocks (padding noise)
            auto noisy = std::vector<air::ModalitySample>();
            for (const auto* s : samples)
                noisy.push_back(*s);
            for (auto& s : noisy)
                for (int q = 0; q < air::kModalities; ++q)
                    if (!set.has(q))
                        for (auto& v : s.feature(q))
                            v += 10.0 * rng.normal();
            failures += !(veh::predict(pruned, testsupport::pointers(noisy)) == reference);
            checks += 3;
        }
    }
    Outcome o;
    o.pass = bitwise && failures == 0;
    o.detail = std::string("full-set pruned model ") + (bitwise ? "bitwise equal" : "DIFFERS") + "; " +
               std::to_string(checks) + " absent-block perturbations, " + std::to_string(failures) +
               " changed predictions";
    return o;
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "prop1 permutation invariance of the sum rate", 5, c1},
        {2, "prop2 permutation equivariance of the policy", 30, c2},
        {3, "prop3 Wasserstein bound on the gradient gap", 60, c3},
        {4, "gradient suite", 60, c4},
        {5, "feasibility suite", 60, c5},
        {6, "oracle equivalence", 600, c6},
        {7, "ablation orderings", 1800, c7},
        {8, "imbalance efficacy ordering", 1800, c8},
        {9, "overhead arithmetic", 1, c9},
        {10, "DA- balancing", 600, c10},
        {11, "DA+ distribution repair", 300, c11},
        {12, "pruned deployment", 10, c12},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i)
        wanted.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id))
            continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs < c.limit_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
                  << std::fixed << std::setprecision(2) << secs << " s, limit " << std::setprecision(0) << c.limit_s
                  << " s" << (in_time ? "" : ", OVER TIME") << "]" << std::defaultfloat << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << '\n';
    return failed ? 1 : 0;
}

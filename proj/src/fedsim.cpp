// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace beamgraph::fed {

using tk::DenseArray;
using tk::ParameterStore;

std::vector<const air::ModalitySample*> Client::train_ptrs() const {
    std::vector<const air::ModalitySample*> p;
    for (const auto& s : train)
        p.push_back(&s);
    return p;
}

std::vector<const air::ModalitySample*> Client::test_ptrs() const {
    std::vector<const air::ModalitySample*> p;
    for (const auto& s : test)
        p.push_back(&s);
    return p;
}

Split split_timesteps(int timesteps, double train_fraction, std::uint64_t seed) {
    require(timesteps >= 2, "split_timesteps: need at least two timesteps");
    require(train_fraction > 0 && train_fraction < 1, "split_timesteps: train_fraction must lie in (0, 1)");
    Rng rng = Rng::substream(seed, "fedsim:split");
    auto order = rng.permutation(static_cast<std::size_t>(timesteps));
    auto n_train = static_cast<std::size_t>(std::lround(train_fraction * timesteps));
    n_train = std::clamp<std::size_t>(n_train, 1, static_cast<std::size_t>(timesteps) - 1);
    Split s;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_train ? s.train_t : s.test_t).push_back(static_cast<int>(order[i]));
    std::sort(s.train_t.begin(), s.train_t.end());
    std::sort(s.test_t.begin(), s.test_t.end());
    return s;
}

std::vector<Client> make_clients(const air::Dataset& d, const Split& split) {
    std::vector<Client> out;
    for (int k = 0; k < d.vehicles(); ++k) {
        Client c;
        c.id = k;
        c.set = d.scenario.vehicles[k].modalities;
        for (int t : split.train_t)
            c.train.push_back(d.streams[k][t]);
        for (int t : split.test_t)
            c.test.push_back(d.streams[k][t]);
        out.push_back(std::move(c));
    }
    return out;
}

ParameterStore aggregate(const std::vector<Upload>& uploads, const ParameterStore& previous, bool size_weighted) {
    require(!uploads.empty(), "aggregate: no uploads");
    ParameterStore out = previous;
    for (auto& [name, entry] : out) {
        // Mean written as first + weighted mean of offsets from it, so identical
        // uploads come back bitwise.
        const DenseArray* first = nullptr;
        DenseArray acc(entry.value.shape());
        double weight = 0.0;
        for (const auto& u : uploads) {
            if (!veh::owned_by(name, u.set) || !u.params->contains(name))
                continue;
            const auto& v = u.params->at(name).value;
            require(v.same_shape(acc), "aggregate: shape mismatch for " + name);
            if (first == nullptr)
                first = &v;
            const double wgt = size_weighted ? static_cast<double>(u.samples) : 1.0;
            for (std::size_t i = 0; i < acc.size(); ++i)
                acc[i] += wgt * (v[i] - (*first)[i]);
            weight += wgt;
        }
        if (first == nullptr)
            continue;
        require(weight > 0.0, "aggregate: zero total weight for " + name);
        for (std::size_t i = 0; i < acc.size(); ++i)
            entry.value[i] = (*first)[i] + acc[i] / weight;
    }
    return out;
}

std::size_t payload_bytes(const ParameterStore& p) {
    return 8 * p.scalar_count();
}

FlResult run_fl(const std::vector<Client>& clients, const ParameterStore& initial, const veh::VehicleConfig& vcfg,
                const FlConfig& cfg, std::uint64_t seed, const HookFactory& hooks) {
    require(!clients.empty(), "run_fl: no clients");
    require(cfg.rounds >= 1 && cfg.local_epochs >= 1, "run_fl: rounds and local_epochs must be >= 1");
    FlResult res;
    res.global = initial;
    std::vector<tk::AdamW> opts;
    std::vector<Rng> shuffles;
    for (const auto& c : clients) {
        opts.emplace_back(tk::AdamWConfig{.lr = cfg.local.lr, .weight_decay = cfg.local.weight_decay});
        shuffles.push_back(Rng::substream(seed, "fl:client" + std::to_string(c.id) + ":shuffle"));
    }
    for (int round = 1; round <= cfg.rounds; ++round) {
        std::vector<ParameterStore> local(clients.size());
        std::vector<RoundRecord> records(clients.size());
        for (std::size_t i = 0; i < clients.size(); ++i) {
            const auto& c = clients[i];
            const ModalitySet set = c.set;
            local[i] = res.global.subset([set](std::string_view n) { return veh::owned_by(n, set); });
            CommCounter comm;
            comm.down += payload_bytes(local[i]);
            std::optional<veh::MinibatchHook> hook;
            if (hooks)
                hook = hooks(i, round, comm);
            const auto data = c.train_ptrs();
            double loss = 0.0;
            for (int e = 0; e < cfg.local_epochs; ++e)
                loss = veh::local_epoch(local[i], vcfg, data, set, cfg.local, opts[i], shuffles[i],
                                        hook ? &*hook : nullptr, cfg.update_filter)
                           .loss;
            comm.up += payload_bytes(local[i]);
            records[i].round = round;
            records[i].client = c.id;
            records[i].local_loss = loss;
            records[i].bytes_up = comm.up;
            records[i].bytes_down = comm.down;
        }
        std::vector<Upload> uploads;
        for (std::size_t i = 0; i < clients.size(); ++i)
            uploads.push_back({clients[i].set, &local[i], clients[i].train.size()});
        res.global = aggregate(uploads, res.global, cfg.size_weighted);
        for (std::size_t i = 0; i < clients.size(); ++i) {
            auto pruned = veh::prune_for(clients[i].set, res.global, vcfg);
            const auto test = clients[i].test_ptrs();
            if (!test.empty()) {
                const auto acc = veh::mean_accuracy(veh::predict(pruned, test), test);
                records[i].test_exact = acc.exact;
                records[i].test_f1 = acc.f1;
            }
            res.bytes_up += records[i].bytes_up;
            res.bytes_down += records[i].bytes_down;
            res.history.push_back(records[i]);
        }
    }
    return res;
}

UbResult run_ub(const std::vector<Client>& clients, const ParameterStore& initial, const veh::VehicleConfig& vcfg,
                int epochs, const veh::LocalTrainConfig& local, std::uint64_t seed) {
    require(!clients.empty(), "run_ub: no clients");
    require(epochs >= 1, "run_ub: epochs must be >= 1");
    ModalitySet set;
    UbResult res;
    // The server only receives the modalities each vehicle actually carries.
    std::vector<air::ModalitySample> data;
    for (const auto& c : clients) {
        set.bits |= c.set.bits;
        for (const auto& s : c.train) {
            auto& copy = data.emplace_back(s);
            std::size_t values = s.label.size();
            for (int q = 0; q < air::kModalities; ++q) {
                copy.available[q] = s.available[q] && c.set.has(q);
                if (copy.available[q])
                    values += s.feature(q).size();
            }
            res.raw_bytes += 8 * values;
        }
    }
    std::vector<const air::ModalitySample*> pooled;
    for (const auto& s : data)
        pooled.push_back(&s);
    res.pooled_samples = pooled.size();
    // A lone client keeps its own shuffle stream so the result matches its federated run.
    const std::string owner = clients.size() == 1 ? "client" + std::to_string(clients.front().id) : "pooled";
    Rng shuffle = Rng::substream(seed, "fl:" + owner + ":shuffle");
    res.params = initial.subset([set](std::string_view n) { return veh::owned_by(n, set); });
    tk::AdamW opt({.lr = local.lr, .weight_decay = local.weight_decay});
    for (int e = 0; e < epochs; ++e)
        res.epoch_loss.push_back(veh::local_epoch(res.params, vcfg, pooled, set, local, opt, shuffle).loss);
    return res;
}

veh::Accuracy test_accuracy(const std::vector<Client>& clients, const ParameterStore& params,
                            const veh::VehicleConfig& vcfg) {
    veh::Accuracy total;
    std::size_t n = 0;
    for (const auto& c : clients) {
        const auto test = c.test_ptrs();
        if (test.empty())
            continue;
        auto pruned = veh::prune_for(c.set, params, vcfg);
        const auto a = veh::mean_accuracy(veh::predict(pruned, test), test);
        const double m = static_cast<double>(test.size());
        total.exact += a.exact * m;
        total.precision += a.precision * m;
        total.recall += a.recall * m;
        total.f1 += a.f1 * m;
        n += test.size();
    }
    if (n > 0) {
        total.exact /= static_cast<double>(n);
        total.precision /= static_cast<double>(n);
        total.recall /= static_cast<double>(n);
        total.f1 /= static_cast<double>(n);
    }
    return total;
}

EvalMetrics evaluate(const air::Dataset& d, const std::vector<ModalitySet>& sets, const std::vector<int>& test_t,
                     const ParameterStore& vehicle_params, const veh::VehicleConfig& vcfg, ParameterStore& rsu_params,
                     const EvalConfig& cfg) {
    const int K = d.vehicles();
    require(static_cast<int>(sets.size()) == K, "evaluate: one modality set per vehicle required");
    std::map<std::uint8_t, veh::PrunedModel> models;
    if (!cfg.ground_truth)
        for (const auto& s : sets)
            if (!models.contains(s.bits))
                models.emplace(s.bits, veh::prune_for(s, vehicle_params, vcfg));
    EvalMetrics m;
    double exact = 0.0, f1 = 0.0;
    int predictions = 0;
    for (int t : test_t) {
        const auto truth = d.feedback_at(t);
        air::FeedbackMatrix v = truth;
        if (!cfg.ground_truth) {
            for (int k = 0; k < K; ++k) {
                const auto& sample = d.streams[k][t];
                auto& model = models.at(sets[k].bits);
                const DenseArray p = veh::predict(model, {&sample});
                const auto a = veh::accuracy(p.row(0), sample.label);
                exact += a.exact;
                f1 += a.f1;
                ++predictions;
                for (int w = 0; w < v.rows(); ++w)
                    v(w, k) = p(0, w) > 0.5 ? 1 : 0;
            }
        }
        // Vehicles reporting no candidate beam are left unserved.
        std::vector<int> served;
        for (int k = 0; k < K; ++k)
            if (v.col(k).any())
                served.push_back(k);
        const auto g_all = air::beam_domain(d.channels_at(t), d.codebook);
        double rate = 0.0;
        if (!served.empty()) {
            air::FeedbackMatrix vs(v.rows(), static_cast<int>(served.size()));
            for (std::size_t j = 0; j < served.size(); ++j)
                vs.col(static_cast<int>(j)) = v.col(served[j]);
            const auto ts = rsu::scale_to_budget(rsu::rsu_forward(vs, rsu_params, cfg.projection),
                                                 cfg.projection.p_max);
            air::Strategy full = air::Strategy::Zero(v.rows(), K);
            for (std::size_t j = 0; j < served.size(); ++j)
                full.col(served[j]) = ts.col(static_cast<int>(j));
            rate = air::sum_rate(g_all, full, cfg.sigma2).total;
        }
        m.sum_rate += rate;
        m.effective_rate += air::effective_sum_rate(rate, cfg.t_delay, cfg.t_coher);
        ++m.snapshots;
    }
    if (m.snapshots > 0) {
        m.sum_rate /= m.snapshots;
        m.effective_rate /= m.snapshots;
    }
    if (predictions > 0) {
        m.exact = exact / predictions;
        m.f1 = f1 / predictions;
    } else {
        m.exact = m.f1 = 1.0;
    }
    return m;
}

void write_rounds_csv(const std::filesystem::path& path, const std::vector<RoundRecord>& history) {
    std::ofstream os(path);
    require(static_cast<bool>(os), "write_rounds_csv: cannot open " + path.string());
    os << "# beamgraph rounds v1\n";
    os << "round,client,local_loss,test_exact,test_f1,bytes_up,bytes_down\n";
    os.precision(17);
    for (const auto& r : history)
        os << r.round << ',' << r.client << ',' << r.local_loss << ',' << r.test_exact << ',' << r.test_f1 << ','
           << r.bytes_up << ',' << r.bytes_down << '\n';
}

}  // namespace beamgraph::fed

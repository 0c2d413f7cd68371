// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/balance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <set>

#include "json.hpp"

namespace beamgraph::bal {

using tk::Binder;
using tk::DenseArray;
using tk::ParameterStore;
using tk::Tape;
using tk::Var;

// ---------------------------------------------------------------------------
// Imbalance measures

std::string combo_key(const std::vector<int>& label) {
    std::string k;
    k.reserve(label.size());
    for (int b : label)
        k.push_back(b ? '1' : '0');
    return k;
}

std::vector<int> combo_bits(const std::string& key) {
    std::vector<int> bits;
    for (char c : key) {
        require(c == '0' || c == '1', "combo_bits: key must be a bit string");
        bits.push_back(c == '1');
    }
    return bits;
}

void LabelDistribution::add(const std::vector<int>& label, double n) {
    require(n >= 0, "LabelDistribution: negative count");
    counts[combo_key(label)] += n;
    total += n;
}

double LabelDistribution::count(const std::string& key) const {
    auto it = counts.find(key);
    return it == counts.end() ? 0.0 : it->second;
}

LabelDistribution label_distribution(const std::vector<air::ModalitySample>& samples) {
    LabelDistribution d;
    for (const auto& s : samples)
        d.add(s.label);
    return d;
}

Completeness completeness(const std::vector<std::array<std::size_t, kModalities>>& counts) {
    require(!counts.empty(), "completeness: no vehicles");
    Completeness c;
    for (const auto& row : counts) {
        const std::size_t top = *std::max_element(row.begin(), row.end());
        require(top > 0, "completeness: a vehicle has no samples in any modality");
        std::array<double, kModalities> k{};
        for (int q = 0; q < kModalities; ++q) {
            k[q] = static_cast<double>(row[q]) / static_cast<double>(top);
            c.global[q] += k[q];
        }
        c.per_vehicle.push_back(k);
    }
    for (auto& g : c.global)
        g /= static_cast<double>(counts.size());
    return c;
}

Completeness completeness(const std::vector<fed::Client>& clients) {
    std::vector<std::array<std::size_t, kModalities>> counts;
    for (const auto& c : clients) {
        std::array<std::size_t, kModalities> n{};
        for (const auto& s : c.train)
            for (int q : c.set.members())
                n[q] += s.available[q] ? 1 : 0;
        counts.push_back(n);
    }
    return completeness(counts);
}

std::vector<double> contribution(const std::vector<double>& rates, double eps, double cap) {
    require(rates.size() >= 2, "contribution: needs at least two modalities");
    require(eps > 0 && cap > 0, "contribution: eps and cap must be positive");
    const std::size_t n = rates.size();
    std::vector<double> phi(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i)
                acc += rates[i] / std::max(rates[j], eps);
        phi[i] = std::min(acc / static_cast<double>(n - 1), cap);
    }
    return phi;
}

double overlap(const std::vector<LabelDistribution>& dists) {
    require(dists.size() >= 2, "overlap: needs at least two vehicles");
    for (const auto& d : dists)
        require(d.total > 0, "overlap: empty label distribution");
    double acc = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < dists.size(); ++i)
        for (std::size_t j = i + 1; j < dists.size(); ++j) {
            double s = 0.0;
            for (const auto& [key, n] : dists[i].counts)
                s += std::min(n / dists[i].total, dists[j].count(key) / dists[j].total);
            acc += s;
            ++pairs;
        }
    return std::clamp(acc / pairs, 0.0, 1.0);
}

double harmonious_loss(const std::vector<std::vector<double>>& phi, const std::vector<std::vector<double>>& rates,
                       double alpha, double beta) {
    require(alpha >= 0 && beta >= 0, "harmonious_loss: alpha and beta must be non-negative");
    require(!rates.empty(), "harmonious_loss: no vehicles");
    double dev = 0.0, r = 0.0;
    for (const auto& v : phi)
        for (double p : v)
            dev += std::abs(1.0 - p);
    for (const auto& v : rates)
        for (double x : v)
            r += x;
    return alpha * dev + beta * (-r) / static_cast<double>(rates.size());
}

HarmoniousTerm harmonious_term(const std::vector<double>& rates, double alpha, double beta, int vehicles, double eps,
                               double cap) {
    require(vehicles >= 1, "harmonious_term: vehicles must be >= 1");
    const std::size_t n = rates.size();
    HarmoniousTerm t;
    t.phi = contribution(rates, eps, cap);
    t.grad.assign(n, -beta / vehicles);
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        t.loss += alpha * std::abs(1.0 - t.phi[i]);
        const double sign = t.phi[i] > 1.0 ? 1.0 : (t.phi[i] < 1.0 ? -1.0 : 0.0);
        if (sign == 0.0 || t.phi[i] >= cap)
            continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i)
                continue;
            const double dj = std::max(rates[j], eps);
            t.grad[i] += alpha * sign * inv / dj;
            if (rates[j] > eps)
                t.grad[j] -= alpha * sign * inv * rates[i] / (dj * dj);
        }
    }
    double rsum = 0.0;
    for (double r : rates)
        rsum += r;
    t.loss -= beta * rsum / vehicles;
    return t;
}

// ---------------------------------------------------------------------------
// Harmonious branch

ParameterStore init_harmonious_params(int modalities, const HarmoniousConfig& cfg, Rng& rng) {
    require(modalities >= 1 && cfg.l_h >= 1, "init_harmonious_params: invalid sizes");
    ParameterStore s;
    const auto lh = static_cast<std::size_t>(cfg.l_h);
    tk::add_affine(s, "har/in", static_cast<std::size_t>(modalities), lh, rng);
    s.add("har/attn/q", DenseArray::vector({rng.uniform(-1, 1)}));
    s.add("har/attn/k", DenseArray::vector({rng.uniform(-1, 1)}));
    tk::add_affine(s, "har/out", lh, static_cast<std::size_t>(modalities), rng);
    s.at("har/out/b").value.fill(cfg.keep_bias);
    return s;
}

Var harmonious_logits(Binder& bind, Var phi_prev) {
    const std::size_t n = phi_prev.value().size();
    Var row = tk::reshape(phi_prev, {1, n});
    Var h = tk::relu(tk::affine(row, bind("har/in/w"), bind("har/in/b")));  // 1 x L_H
    Var hq = tk::mul_scalar(h, bind("har/attn/q"));
    Var hk = tk::mul_scalar(h, bind("har/attn/k"));
    Var attn = tk::softmax_t(tk::matmul(tk::transpose(hq), hk), 1.0);  // L_H x L_H, row i attends over j
    Var mixed = tk::matmul(h, tk::transpose(attn));
    Var logits = tk::affine(tk::add(h, mixed), bind("har/out/w"), bind("har/out/b"));
    return tk::reshape(logits, {n});
}

Var harmonious_masks(Var logits) {
    Var soft = tk::sigmoid(logits);
    const auto& z = logits.value();
    DenseArray hard(z.shape());
    bool any = false;
    for (std::size_t i = 0; i < z.size(); ++i) {
        hard[i] = soft.value()[i] > 0.5 ? 1.0 : 0.0;
        any = any || hard[i] > 0.0;
    }
    if (!any) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < z.size(); ++i)
            if (z[i] > z[best])
                best = i;
        hard[best] = 1.0;
    }
    return tk::straight_through_mix(logits.tape().constant(std::move(hard)), soft);
}

// ---------------------------------------------------------------------------
// DA-

DaMinus::DaMinus(const air::Dataset& d, const ParameterStore& rsu_params, const std::vector<fed::Client>& clients,
                 const veh::VehicleConfig& vcfg, const fed::FlConfig& fl, const DaMinusConfig& cfg,
                 std::uint64_t seed)
    : d_(d), rsu_(rsu_params), clients_(clients), vcfg_(vcfg), fl_(fl), cfg_(cfg) {
    require(cfg.alpha >= 0 && cfg.beta >= 0, "DA-: alpha and beta must be non-negative");
    for (const auto& c : clients) {
        ClientState st;
        st.members = c.set.members();
        Rng rng = Rng::substream(seed, "daminus:client" + std::to_string(c.id) + ":init");
        st.har = init_harmonious_params(static_cast<int>(st.members.size()), cfg.har, rng);
        st.opt = tk::AdamW({.lr = cfg.har.lr, .weight_decay = 0.0});
        // No contribution history at the start: every branch counts as balanced.
        st.phi_prev.assign(st.members.size(), 1.0);
        state_.push_back(std::move(st));
    }
}

std::vector<double> DaMinus::masks_for(ClientState& st) {
    if (st.members.size() < 2)
        return std::vector<double>(st.members.size(), 1.0);
    Tape tape;
    Binder bind(tape, st.har, true);
    Var m = harmonious_masks(harmonious_logits(bind, tape.constant(DenseArray::vector(st.phi_prev))));
    return m.value().storage();
}

fed::HookFactory DaMinus::factory() {
    return [this](std::size_t client, int round, fed::CommCounter& comm) -> std::optional<veh::MinibatchHook> {
        auto& st = state_[client];
        st.epoch = 1;
        st.batch_in_epoch = 0;
        veh::MinibatchHook hook;
        hook.mask = [this, client](const veh::Batch&) {
            auto& s = state_[client];
            const auto m = masks_for(s);
            veh::BlockMask out = veh::kKeepAll;
            for (std::size_t i = 0; i < s.members.size(); ++i)
                out[s.members[i]] = m[i];
            return out;
        };
        hook.after_step = [this, client, round, &comm](const veh::Batch& b, ParameterStore& params) {
            after_step(client, round, b, params, comm);
        };
        return hook;
    };
}

namespace {

// Snapshot rows (K x W) of timestep t with vehicle k's row replaced.
DenseArray snapshot_rows(const air::Dataset& d, int t, int k, std::span<const double> row) {
    const auto K = static_cast<std::size_t>(d.vehicles());
    const auto W = static_cast<std::size_t>(d.scenario.cfg.w);
    DenseArray rows({K, W});
    for (std::size_t i = 0; i < K; ++i)
        for (std::size_t w = 0; w < W; ++w)
            rows(i, w) = i == static_cast<std::size_t>(k) ? row[w] : d.streams[i][t].label[w];
    return rows;
}

}  // namespace

void DaMinus::after_step(std::size_t client, int round, const veh::Batch& b, ParameterStore& params,
                         fed::CommCounter& comm) {
    auto& st = state_[client];
    const std::size_t n = st.members.size();
    const auto W = static_cast<std::size_t>(vcfg_.w);
    const double inv_b = 1.0 / static_cast<double>(b.size);

    if (n >= 2) {
        // Vehicle side: uni-modal predictions under the current masks.
        Tape vt;
        Binder bind_v(vt, params, true);
        Binder bind_h(vt, st.har);
        Var masks = harmonious_masks(harmonious_logits(bind_h, vt.constant(DenseArray::vector(st.phi_prev))));
        std::array<Var, kModalities> mask_vars;
        std::vector<Var> uni(n);
        std::vector<double> keep(n);
        for (std::size_t i = 0; i < n; ++i) {
            const int q = st.members[i];
            keep[i] = masks.value()[i];
            if (b.rows[q].empty())
                continue;
            mask_vars[q] = tk::gather(masks, {i});
            std::array<Var, kModalities> inputs;
            inputs[q] = vt.constant(b.x[q]);
            uni[i] = veh::forward_inputs(bind_v, vcfg_, b, inputs, ModalitySet::only(q), tk::BnMode::eval,
                                         veh::kKeepAll, &mask_vars)
                         .probs;
        }
        const bool all_kept = std::all_of(keep.begin(), keep.end(), [](double m) { return m == 1.0; });

        // RSU side: per-sample policy on the snapshot with this vehicle's row
        // replaced by a uni-modal prediction. Missing modalities score zero.
        struct Probe {
            std::unique_ptr<Tape> tape;
            Var rows, rates;
            std::size_t i, b;
            int k;
        };
        std::vector<Probe> probes;
        std::vector<double> rates(n, 0.0), plain(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!uni[i].valid())
                continue;
            const int q = st.members[i];
            DenseArray unmasked;
            if (!all_kept) {
                Tape pt;
                Binder pb(pt, params, true);
                std::array<Var, kModalities> inputs;
                inputs[q] = pt.constant(b.x[q]);
                unmasked = veh::forward_inputs(pb, vcfg_, b, inputs, ModalitySet::only(q), tk::BnMode::eval).probs.value();
            }
            for (std::size_t r : b.rows[q]) {
                const auto* s = b.samples[r];
                if (s->t < 0)
                    continue;
                const auto g = air::beam_domain(d_.channels_at(s->t), d_.codebook);
                Probe p;
                p.tape = std::make_unique<Tape>();
                p.i = i;
                p.b = r;
                p.k = s->vehicle;
                const DenseArray rows = snapshot_rows(d_, s->t, s->vehicle, uni[i].value().row(r));
                p.rows = p.tape->variable(rows);
                Binder rb(*p.tape, rsu_, true);
                p.rates = rsu::user_rates(rsu::rsu_policy(rb, p.rows, rsu::adjacency_from_rows(rows), cfg_.projection),
                                          g, cfg_.sigma2);
                const double r_masked = p.rates.value()[static_cast<std::size_t>(p.k)];
                rates[i] += inv_b * r_masked;
                if (all_kept) {
                    plain[i] += inv_b * r_masked;
                } else {
                    Tape ut;
                    Binder ub(ut, rsu_, true);
                    const DenseArray urows = snapshot_rows(d_, s->t, s->vehicle, unmasked.row(r));
                    Var ur = rsu::user_rates(
                        rsu::rsu_policy(ub, ut.constant(urows), rsu::adjacency_from_rows(urows), cfg_.projection), g,
                        cfg_.sigma2);
                    plain[i] += inv_b * ur.value()[static_cast<std::size_t>(p.k)];
                }
                comm.up += 8 * W;
                probes.push_back(std::move(p));
            }
        }

        const auto term = harmonious_term(rates, cfg_.alpha, cfg_.beta, static_cast<int>(clients_.size()));
        // Gradients of the harmonious loss with respect to each uni-modal prediction row.
        std::vector<DenseArray> seeds(n);
        for (std::size_t i = 0; i < n; ++i)
            if (uni[i].valid())
                seeds[i] = DenseArray(uni[i].shape());
        for (auto& p : probes) {
            DenseArray up(p.rates.shape());
            up[static_cast<std::size_t>(p.k)] = term.grad[p.i] * inv_b;
            p.tape->backward({{p.rates, up}});
            const auto& g = p.rows.grad();
            for (std::size_t w = 0; w < W; ++w)
                seeds[p.i](p.b, w) += g(static_cast<std::size_t>(p.k), w);
            comm.down += 8 * W;
        }
        comm.down += 8 * n;
        std::vector<std::pair<Var, DenseArray>> vseeds;
        for (std::size_t i = 0; i < n; ++i)
            if (uni[i].valid() && uni[i].requires_grad())
                vseeds.emplace_back(uni[i], seeds[i]);
        st.har.zero_grad();
        if (!vseeds.empty())
            vt.backward(vseeds);
        st.opt.step(st.har);

        st.phi_prev = contribution(plain);
        if (st.phi_sum.empty()) {
            st.phi_sum.assign(n, 0.0);
            st.keep_sum.assign(n, 0.0);
            st.min_kept = static_cast<int>(n);
        }
        int kept = 0;
        for (std::size_t i = 0; i < n; ++i) {
            st.phi_sum[i] += st.phi_prev[i];
            st.keep_sum[i] += keep[i];
            kept += keep[i] > 0.0;
        }
        st.min_kept = std::min(st.min_kept, kept);
    }

    ++st.batches;
    ++st.batch_in_epoch;
    const auto bs = static_cast<std::size_t>(fl_.local.batch_size);
    const int per_epoch = static_cast<int>((clients_[client].train.size() + bs - 1) / bs);
    if (st.batch_in_epoch == per_epoch) {
        PhiRecord rec;
        rec.round = round;
        rec.epoch = st.epoch;
        rec.client = clients_[client].id;
        if (n >= 2) {
            for (std::size_t i = 0; i < n; ++i) {
                rec.phi.push_back(st.phi_sum[i] / st.batches);
                rec.mask_keep_rate.push_back(st.keep_sum[i] / st.batches);
            }
            rec.min_kept = st.min_kept;
        } else {
            rec.phi.assign(n, 1.0);
            rec.mask_keep_rate.assign(n, 1.0);
            rec.min_kept = static_cast<int>(n);
        }
        log_.push_back(rec);
        st.phi_sum.clear();
        st.keep_sum.clear();
        st.batches = 0;
        st.batch_in_epoch = 0;
        ++st.epoch;
    }
}

std::vector<double> DaMinus::mean_deviation_by_epoch() const {
    std::map<int, std::pair<double, int>> acc;
    for (const auto& r : log_) {
        if (r.phi.size() < 2)
            continue;
        const int e = (r.round - 1) * fl_.local_epochs + r.epoch;
        double dev = 0.0;
        for (double p : r.phi)
            dev += std::abs(1.0 - p);
        acc[e].first += dev / static_cast<double>(r.phi.size());
        acc[e].second += 1;
    }
    std::vector<double> out;
    for (const auto& [e, v] : acc)
        out.push_back(v.first / v.second);
    return out;
}

// ---------------------------------------------------------------------------
// DA+

std::vector<TargetCombo> select_target_combos(const LabelDistribution& n,
                                              const std::function<double(const std::string&)>& rank,
                                              const std::vector<std::string>& support, std::size_t limit) {
    require(n.total > 0, "select_target_combos: empty label distribution");
    double top = 0.0;
    for (const auto& [k, c] : n.counts)
        top = std::max(top, c);
    std::set<std::string> keys;
    for (const auto& [k, c] : n.counts)
        keys.insert(k);
    keys.insert(support.begin(), support.end());
    std::vector<TargetCombo> cands;
    for (const auto& k : keys) {
        const double delta = top - n.count(k);
        if (delta > 0)
            cands.push_back({k, delta, rank ? rank(k) : 0.0});
    }
    std::sort(cands.begin(), cands.end(), [](const TargetCombo& a, const TargetCombo& b) {
        if (a.score != b.score)
            return a.score > b.score;
        if (a.delta != b.delta)
            return a.delta > b.delta;
        return a.key < b.key;
    });
    if (cands.size() > limit)
        cands.resize(limit);
    return cands;
}

double combo_sum_rate(const air::Dataset& d, int vehicle, const std::vector<int>& timesteps, const std::string& key,
                      ParameterStore& rsu_params, const rsu::ProjectionConfig& proj, double sigma2) {
    require(!timesteps.empty(), "combo_sum_rate: no timesteps");
    const auto bits = combo_bits(key);
    double total = 0.0;
    for (int t : timesteps) {
        auto v = d.feedback_at(t);
        require(static_cast<int>(bits.size()) == v.rows(), "combo_sum_rate: key length differs from W");
        for (int w = 0; w < v.rows(); ++w)
            v(w, vehicle) = bits[w];
        const auto strat = rsu::scale_to_budget(rsu::rsu_forward(v, rsu_params, proj), proj.p_max);
        total += air::sum_rate(air::beam_domain(d.channels_at(t), d.codebook), strat, sigma2).total;
    }
    return total / static_cast<double>(timesteps.size());
}

namespace {

void require_batch_norm(const ParameterStore& params, ModalitySet set) {
    require(!set.empty(), "generate: empty modality set");
    for (int q : set.members())
        require(params.contains(veh::encoder_prefix(q) + "bn/running_mean"),
                std::string("generate: no batch-norm stage for modality ") + air::kModalityLetters[q]);
}

Var l2_norm(Var x) {
    return tk::sqrt(tk::sum(tk::square(x)));
}

struct LossParts {
    Var bn, bce;
    double mean_gap_sq = 0.0;
};

LossParts generation_terms(Binder& bind_v, const veh::VehicleConfig& vcfg, const veh::Batch& batch,
                           const std::array<Var, kModalities>& inputs, ModalitySet set) {
    Tape& tape = bind_v.tape();
    const auto f = veh::forward_inputs(bind_v, vcfg, batch, inputs, set, tk::BnMode::eval);
    LossParts out;
    for (int q : set.members()) {
        const std::string enc = veh::encoder_prefix(q);
        const auto& mu_run = bind_v.store().at(enc + "bn/running_mean").value;
        DenseArray sd_run = bind_v.store().at(enc + "bn/running_var").value;
        for (auto& v : sd_run.values())
            v = std::sqrt(v);
        Var pre = f.enc[q].pre_norm;
        Var mean_diff = tk::sub(tk::column_mean(pre), tape.constant(mu_run));
        Var sd_diff = tk::sub(tk::sqrt(tk::column_var(pre)), tape.constant(sd_run));
        Var term = tk::add(l2_norm(mean_diff), l2_norm(sd_diff));
        out.bn = out.bn.valid() ? tk::add(out.bn, term) : term;
        for (double v : mean_diff.value().values())
            out.mean_gap_sq += v * v;
    }
    out.bce = tk::bce(batch.labels, f.probs);
    return out;
}

veh::Batch synthetic_batch(std::size_t rows, ModalitySet set, const std::vector<int>& target) {
    veh::Batch b;
    b.size = rows;
    b.labels = DenseArray({rows, target.size()});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t w = 0; w < target.size(); ++w)
            b.labels(r, w) = target[w];
    for (int q : set.members())
        for (std::size_t r = 0; r < rows; ++r)
            b.rows[q].push_back(r);
    return b;
}

}  // namespace

GenerationLoss generation_loss(const ParameterStore& params, const veh::VehicleConfig& vcfg, ModalitySet set,
                               const std::array<DenseArray, kModalities>& inputs, const std::vector<int>& target) {
    require_batch_norm(params, set);
    require(static_cast<int>(target.size()) == vcfg.w, "generation_loss: target length differs from W");
    const std::size_t rows = inputs[set.members().front()].rows();
    require(rows >= 2, "generation_loss: batch statistics need at least two rows");
    ParameterStore model = params;
    Tape tape;
    Binder bind(tape, model, true);
    std::array<Var, kModalities> vars;
    for (int q : set.members()) {
        require(inputs[q].rows() == rows, "generation_loss: row counts differ between modalities");
        vars[q] = tape.constant(inputs[q]);
    }
    const auto parts = generation_terms(bind, vcfg, synthetic_batch(rows, set, target), vars, set);
    return {parts.bn.value()[0], parts.bce.value()[0], std::sqrt(parts.mean_gap_sq)};
}

SynthBatch generate(const ParameterStore& params, const veh::VehicleConfig& vcfg, ModalitySet set,
                    const std::vector<int>& target, const GenerateConfig& cfg, std::uint64_t seed) {
    require_batch_norm(params, set);
    require(static_cast<int>(target.size()) == vcfg.w, "generate: target length differs from W");
    require(cfg.count >= 0 && cfg.batch_size >= 2 && cfg.steps >= 0 && cfg.lr > 0, "generate: invalid settings");
    ParameterStore model = params;
    Rng rng = Rng::substream(seed, "daplus:generate:" + combo_key(target));
    SynthBatch out;
    out.target = target;
    out.loss_trace.assign(static_cast<std::size_t>(cfg.steps), 0.0);
    int chunks = 0;
    for (int done = 0; done < cfg.count;) {
        // A final chunk of one row is padded to two so batch statistics exist.
        const int rows = std::max(2, std::min(cfg.batch_size, cfg.count - done));
        ParameterStore x;
        for (int q : set.members()) {
            DenseArray init({static_cast<std::size_t>(rows), static_cast<std::size_t>(vcfg.input[q])});
            for (auto& v : init.values())
                v = rng.normal();
            x.add(std::string("x/") + air::kModalityLetters[q], std::move(init));
        }
        const veh::Batch batch = synthetic_batch(static_cast<std::size_t>(rows), set, target);
        tk::AdamW opt({.lr = cfg.lr, .weight_decay = 0.0});
        auto step_loss = [&](bool apply) {
            Tape tape;
            Binder bind_v(tape, model, true);
            Binder bind_x(tape, x);
            std::array<Var, kModalities> vars;
            for (int q : set.members())
                vars[q] = bind_x(std::string("x/") + air::kModalityLetters[q]);
            const auto parts = generation_terms(bind_v, vcfg, batch, vars, set);
            Var total = tk::add(parts.bn, parts.bce);
            if (apply) {
                x.zero_grad();
                tape.backward(total);
                opt.step(x);
            }
            return std::make_pair(total.value()[0], std::sqrt(parts.mean_gap_sq));
        };
        const auto first = step_loss(false);
        if (chunks == 0)
            out.initial_mean_gap = first.second;
        for (int s = 0; s < cfg.steps; ++s)
            out.loss_trace[s] += step_loss(true).first;
        const auto last = step_loss(false);
        if (chunks == 0)
            out.final_mean_gap = last.second;
        const int keep = std::min(rows, cfg.count - done);
        for (int r = 0; r < keep; ++r) {
            air::ModalitySample s;
            s.synthetic = true;
            s.vehicle = -1;
            s.t = -1;
            s.label = target;
            for (int q = 0; q < kModalities; ++q)
                s.available[q] = set.has(q);
            for (int q : set.members()) {
                const auto row = x.at(std::string("x/") + air::kModalityLetters[q]).value.row(static_cast<std::size_t>(r));
                s.feature(q).assign(row.begin(), row.end());
            }
            out.samples.push_back(std::move(s));
        }
        done += keep;
        ++chunks;
    }
    if (chunks > 0)
        for (auto& v : out.loss_trace)
            v /= chunks;
    return out;
}

std::vector<fed::Client> augment_clients(const std::vector<fed::Client>& clients, const air::Dataset& d,
                                         const ParameterStore& global, const veh::VehicleConfig& vcfg,
                                         ParameterStore& rsu_params, const rsu::ProjectionConfig& proj, double sigma2,
                                         const DaPlusConfig& cfg, std::uint64_t seed, DaPlusReport* report) {
    std::vector<std::string> support;
    std::vector<LabelDistribution> before;
    for (const auto& c : clients) {
        before.push_back(label_distribution(c.train));
        for (const auto& [k, n] : before.back().counts)
            support.push_back(k);
    }
    std::sort(support.begin(), support.end());
    support.erase(std::unique(support.begin(), support.end()), support.end());

    std::vector<fed::Client> mixed = clients;
    std::vector<LabelDistribution> current = before;
    DaPlusReport rep;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const auto& c = clients[i];
        std::vector<int> ts;
        for (const auto& s : c.train)
            if (!s.synthetic && s.t >= 0 && ts.size() < 16)
                ts.push_back(s.t);
        auto rank = [&](const std::string& key) {
            return ts.empty() ? 0.0 : combo_sum_rate(d, c.id, ts, key, rsu_params, proj, sigma2);
        };
        auto targets = select_target_combos(before[i], rank, support, cfg.combos);
        for (auto& tgt : targets) {
            int count = static_cast<int>(std::min<double>(tgt.delta, cfg.max_per_combo));
            if (clients.size() >= 2) {
                const double z = overlap(current);
                for (; count > 0; count /= 2) {
                    auto trial = current;
                    trial[i].add(combo_bits(tgt.key), count);
                    if (overlap(trial) >= z)
                        break;
                }
            }
            if (count <= 0)
                continue;
            current[i].add(combo_bits(tgt.key), count);
            tgt.count = count;
            GenerateConfig g = cfg.gen;
            g.count = count;
            const auto synth = generate(global, vcfg, c.set, combo_bits(tgt.key), g,
                                        derive_seed(seed, "daplus:client" + std::to_string(c.id)));
            for (auto s : synth.samples) {
                s.vehicle = c.id;
                mixed[i].train.push_back(std::move(s));
                ++rep.synthetic_samples;
            }
        }
        rep.targets.push_back(targets);
    }
    if (clients.size() >= 2) {
        rep.zeta_before = overlap(before);
        std::vector<LabelDistribution> after;
        for (const auto& c : mixed)
            after.push_back(label_distribution(c.train));
        rep.zeta_after = overlap(after);
    }
    if (report)
        *report = std::move(rep);
    return mixed;
}

fed::FlResult da_plus_finetune(const std::vector<fed::Client>& mixed, const ParameterStore& global,
                               const veh::VehicleConfig& vcfg, const fed::FlConfig& cfg, std::uint64_t seed) {
    fed::FlConfig fl = cfg;
    fl.local.bn_mode = tk::BnMode::eval;
    fl.update_filter = veh::is_decision_layer;
    return fed::run_fl(mixed, global, vcfg, fl, derive_seed(seed, "daplus:finetune"));
}

// ---------------------------------------------------------------------------
// Gradient gap

double w2_diagonal(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma, const Eigen::VectorXd& mu_hat,
                   const Eigen::VectorXd& sigma_hat) {
    require(mu.size() == sigma.size() && mu.size() == mu_hat.size() && mu.size() == sigma_hat.size(),
            "w2: dimension mismatch");
    require((sigma.array() >= 0).all() && (sigma_hat.array() >= 0).all(), "w2: standard deviations must be >= 0");
    return std::sqrt((mu - mu_hat).squaredNorm() + (sigma - sigma_hat).squaredNorm());
}

BoundCheck gradient_bound_check(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma, const Eigen::VectorXd& mu_hat,
                                const Eigen::VectorXd& sigma_hat, const Eigen::MatrixXd& lipschitz_map, int n_samples,
                                std::uint64_t seed) {
    BoundCheck r;
    r.w2 = w2_diagonal(mu, sigma, mu_hat, sigma_hat);
    require(lipschitz_map.cols() == mu.size(), "gradient_bound_check: map width differs from the dimension");
    require(n_samples >= 2, "gradient_bound_check: need at least two samples");
    r.lipschitz = Eigen::JacobiSVD<Eigen::MatrixXd>(lipschitz_map).singularValues()(0);
    Rng rng = Rng::substream(seed, "prop3:montecarlo");
    const auto m = lipschitz_map.rows();
    auto moments = [&](const Eigen::VectorXd& mean, const Eigen::VectorXd& sd) {
        Eigen::VectorXd s1 = Eigen::VectorXd::Zero(m), s2 = Eigen::VectorXd::Zero(m);
        Eigen::VectorXd a(mean.size());
        for (int i = 0; i < n_samples; ++i) {
            for (Eigen::Index j = 0; j < a.size(); ++j)
                a(j) = rng.normal(mean(j), sd(j));
            const Eigen::VectorXd y = lipschitz_map * a;
            s1 += y;
            s2 += y.cwiseProduct(y);
        }
        const double n = n_samples;
        Eigen::VectorXd avg = s1 / n;
        Eigen::VectorXd var = ((s2 - n * avg.cwiseProduct(avg)) / (n - 1)).cwiseMax(0.0);
        return std::make_pair(avg, var);
    };
    const auto [real_mean, real_var] = moments(mu, sigma);
    const auto [syn_mean, syn_var] = moments(mu_hat, sigma_hat);
    r.grad_gap = (syn_mean - real_mean).norm();
    r.stderr_ = std::sqrt((real_var + syn_var).sum() / n_samples);
    r.bound_ok = r.grad_gap <= r.lipschitz * r.w2 + 3.0 * r.stderr_;
    return r;
}

// ---------------------------------------------------------------------------

ImbalanceReport imbalance_report(const std::vector<fed::Client>& clients) {
    ImbalanceReport r;
    r.kappa = completeness(clients);
    if (clients.size() >= 2) {
        std::vector<LabelDistribution> d;
        for (const auto& c : clients)
            d.push_back(label_distribution(c.train));
        r.zeta = overlap(d);
    } else {
        r.zeta = 1.0;
    }
    return r;
}

std::string imbalance_report_text(const ImbalanceReport& r) {
    nlohmann::json j;
    auto letters = [](const std::array<double, kModalities>& v) {
        nlohmann::json o;
        for (int q = 0; q < kModalities; ++q)
            o[std::string(1, air::kModalityLetters[q])] = v[q];
        return o;
    };
    j["kappa_global"] = letters(r.kappa.global);
    j["kappa_per_vehicle"] = nlohmann::json::array();
    for (const auto& v : r.kappa.per_vehicle)
        j["kappa_per_vehicle"].push_back(letters(v));
    j["zeta"] = r.zeta;
    return j.dump(2);
}

void write_phi_csv(const std::filesystem::path& path, const std::vector<PhiRecord>& log) {
    std::ofstream os(path);
    require(static_cast<bool>(os), "write_phi_csv: cannot open " + path.string());
    os << "# beamgraph phi v1\n";
    os << "round,epoch,client,modality_index,phi,keep_rate,min_kept\n";
    os.precision(17);
    for (const auto& r : log)
        for (std::size_t i = 0; i < r.phi.size(); ++i)
            os << r.round << ',' << r.epoch << ',' << r.client << ',' << i << ',' << r.phi[i] << ','
               << r.mask_keep_rate[i] << ',' << r.min_kept << '\n';
}

}  // namespace beamgraph::bal

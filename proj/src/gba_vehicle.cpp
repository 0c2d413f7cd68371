// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/gba_vehicle.hpp"

#include <algorithm>
#include <cmath>

namespace beamgraph::veh {

using tk::Binder;
using tk::BnMode;
using tk::DenseArray;
using tk::Tape;
using tk::Var;

void VehicleConfig::validate() const {
    require(w >= 1, "vehicle config: w must be >= 1");
    for (int q = 0; q < kModalities; ++q)
        require(input[q] >= 1 && latent[q] >= 1, "vehicle config: feature and latent lengths must be >= 1");
    require(enc_hidden >= 1 && fuse_hidden >= 1, "vehicle config: hidden widths must be >= 1");
    require(bn_momentum > 0 && bn_momentum <= 1 && bn_eps > 0, "vehicle config: invalid batch-norm settings");
}

VehicleConfig vehicle_config_for(const air::ScenarioConfig& s) {
    VehicleConfig c;
    c.w = s.w;
    c.input = {2, s.d_r, s.d_l};
    return c;
}

std::string encoder_prefix(int q) {
    return std::string("enc_") + air::kModalityLetters[q] + "/";
}

std::string fusion_block_prefix(int q) {
    return std::string("fuse/") + air::kModalityLetters[q] + "/";
}

bool is_decision_layer(std::string_view name) {
    if (tk::starts_with(name, "fuse/"))
        return true;
    for (int q = 0; q < kModalities; ++q)
        if (tk::starts_with(name, encoder_prefix(q) + "l1/"))
            return true;
    return false;
}

bool owned_by(std::string_view name, ModalitySet set) {
    if (tk::starts_with(name, "fuse/out/"))
        return true;
    for (int q : set.members())
        if (tk::starts_with(name, encoder_prefix(q)) || tk::starts_with(name, fusion_block_prefix(q)))
            return true;
    return false;
}

tk::ParameterStore init_vehicle_params(const VehicleConfig& cfg, ModalitySet set, Rng& rng) {
    cfg.validate();
    require(!set.empty(), "init_vehicle_params: empty modality set");
    tk::ParameterStore s;
    const auto hidden = static_cast<std::size_t>(cfg.enc_hidden);
    const auto fuse_hidden = static_cast<std::size_t>(cfg.fuse_hidden);
    for (int q : set.members()) {
        const std::string enc = encoder_prefix(q);
        const auto latent = static_cast<std::size_t>(cfg.latent[q]);
        tk::add_affine(s, enc + "l0", static_cast<std::size_t>(cfg.input[q]), hidden, rng);
        s.add(enc + "bn/gamma", DenseArray({hidden}, 1.0));
        s.add(enc + "bn/beta", DenseArray({hidden}));
        s.add(enc + "bn/running_mean", DenseArray({hidden}), tk::EntryKind::running_mean);
        s.add(enc + "bn/running_var", DenseArray({hidden}, 1.0), tk::EntryKind::running_var);
        tk::add_affine(s, enc + "l1", hidden, latent, rng);
        const std::string fb = fusion_block_prefix(q);
        tk::add_affine(s, fb.substr(0, fb.size() - 1), latent, fuse_hidden, rng);
    }
    tk::add_affine(s, "fuse/out", fuse_hidden, static_cast<std::size_t>(cfg.w), rng);
    return s;
}

Batch make_batch(const std::vector<const air::ModalitySample*>& samples, ModalitySet set, const VehicleConfig& cfg) {
    Batch b;
    b.size = samples.size();
    b.samples = samples;
    const auto W = static_cast<std::size_t>(cfg.w);
    b.labels = DenseArray({b.size, W});
    for (std::size_t i = 0; i < b.size; ++i) {
        const auto& s = *samples[i];
        require(s.label.size() == W, "make_batch: label length differs from W");
        for (std::size_t w = 0; w < W; ++w)
            b.labels(i, w) = s.label[w];
        for (int q : set.members())
            if (s.available[q])
                b.rows[q].push_back(i);
    }
    for (int q : set.members()) {
        const auto d = static_cast<std::size_t>(cfg.input[q]);
        b.x[q] = DenseArray({b.rows[q].size(), d});
        for (std::size_t r = 0; r < b.rows[q].size(); ++r) {
            const auto& f = samples[b.rows[q][r]]->feature(q);
            require(f.size() == d, std::string("make_batch: feature length mismatch for modality ") +
                                       air::kModalityLetters[q]);
            std::copy(f.begin(), f.end(), b.x[q].row(r).begin());
        }
    }
    return b;
}

EncoderTrace encode(Binder& bind, const VehicleConfig& cfg, int q, Var x, BnMode mode) {
    const std::string enc = encoder_prefix(q);
    require(bind.store().contains(enc + "l0/w"),
            std::string("encode: model has no branch for modality ") + air::kModalityLetters[q]);
    EncoderTrace t;
    t.pre_norm = tk::affine(x, bind(enc + "l0/w"), bind(enc + "l0/b"));
    if (x.value().rows() < 2)
        mode = BnMode::eval;
    auto& store = bind.store();
    Var bn = tk::batch_norm(t.pre_norm, bind(enc + "bn/gamma"), bind(enc + "bn/beta"),
                            store.at(enc + "bn/running_mean").value, store.at(enc + "bn/running_var").value,
                            cfg.bn_momentum, cfg.bn_eps, mode);
    t.out = tk::affine(tk::relu(bn), bind(enc + "l1/w"), bind(enc + "l1/b"));
    return t;
}

Forward forward_inputs(Binder& bind, const VehicleConfig& cfg, const Batch& batch,
                       const std::array<Var, kModalities>& inputs, ModalitySet set, BnMode mode,
                       const BlockMask& mask, const std::array<Var, kModalities>* mask_vars) {
    require(!set.empty(), "forward: empty modality set");
    require(batch.size >= 1, "forward: empty batch");
    Tape& tape = bind.tape();
    Forward f;
    Var hidden;
    for (int q : set.members()) {
        if (batch.rows[q].empty())
            continue;
        require(inputs[q].valid(), "forward: missing input for a modality in the set");
        f.enc[q] = encode(bind, cfg, q, inputs[q], mode);
        Var feat = f.enc[q].out;
        if (mask_vars != nullptr && (*mask_vars)[q].valid())
            feat = tk::mul_scalar(feat, (*mask_vars)[q]);
        else if (mask[q] != 1.0)
            feat = tk::scale(feat, mask[q]);
        const std::string fb = fusion_block_prefix(q);
        Var block = tk::scatter_rows(tk::affine(feat, bind(fb + "w"), bind(fb + "b")), batch.rows[q], batch.size);
        hidden = hidden.valid() ? tk::add(hidden, block) : block;
    }
    if (!hidden.valid())
        hidden = tape.constant(DenseArray({batch.size, static_cast<std::size_t>(cfg.fuse_hidden)}));
    f.fused = hidden;
    f.logits = tk::affine(tk::relu(hidden), bind("fuse/out/w"), bind("fuse/out/b"));
    f.probs = tk::sigmoid(f.logits);
    return f;
}

Forward forward(Binder& bind, const VehicleConfig& cfg, const Batch& batch, ModalitySet set, BnMode mode,
                const BlockMask& mask) {
    std::array<Var, kModalities> inputs;
    for (int q : set.members())
        if (!batch.rows[q].empty())
            inputs[q] = bind.tape().constant(batch.x[q]);
    return forward_inputs(bind, cfg, batch, inputs, set, mode, mask);
}

DenseArray predict(tk::ParameterStore& params, const VehicleConfig& cfg,
                   const std::vector<const air::ModalitySample*>& samples, ModalitySet set) {
    if (samples.empty())
        return DenseArray({0, static_cast<std::size_t>(cfg.w)});
    const Batch b = make_batch(samples, set, cfg);
    Tape tape;
    Binder bind(tape, params, true);
    return forward(bind, cfg, b, set, BnMode::eval).probs.value();
}

Accuracy accuracy(std::span<const double> prob, std::span<const int> label, double threshold) {
    require(prob.size() == label.size(), "accuracy: length mismatch");
    int tp = 0, fp = 0, fn = 0;
    bool exact = true;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const int pred = prob[i] > threshold ? 1 : 0;
        exact = exact && pred == label[i];
        tp += pred && label[i];
        fp += pred && !label[i];
        fn += !pred && label[i];
    }
    Accuracy a;
    a.exact = exact ? 1.0 : 0.0;
    a.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : (fn == 0 ? 1.0 : 0.0);
    a.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
    a.f1 = tp + fp + fn > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 1.0;
    return a;
}

Accuracy mean_accuracy(const DenseArray& prob, const std::vector<const air::ModalitySample*>& samples,
                       double threshold) {
    require(prob.rows() == samples.size(), "mean_accuracy: row count mismatch");
    Accuracy m;
    if (samples.empty())
        return m;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto a = accuracy(prob.row(i), samples[i]->label, threshold);
        m.exact += a.exact;
        m.precision += a.precision;
        m.recall += a.recall;
        m.f1 += a.f1;
    }
    const double n = static_cast<double>(samples.size());
    m.exact /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
}

PrunedModel prune_for(ModalitySet set, const tk::ParameterStore& params, const VehicleConfig& cfg) {
    require(!set.empty(), "prune_for: empty modality set");
    for (int q : set.members())
        require(params.contains(encoder_prefix(q) + "l0/w"),
                std::string("prune_for: model lacks modality ") + air::kModalityLetters[q]);
    PrunedModel m;
    m.set = set;
    m.cfg = cfg;
    m.params = params.subset([set](std::string_view n) { return owned_by(n, set); });
    m.full_scalars = params.scalar_count();
    m.pruned_scalars = m.params.scalar_count();
    return m;
}

DenseArray predict(PrunedModel& model, const std::vector<const air::ModalitySample*>& samples) {
    return predict(model.params, model.cfg, samples, model.set);
}

LocalStats local_epoch(tk::ParameterStore& params, const VehicleConfig& cfg,
                       const std::vector<const air::ModalitySample*>& samples, ModalitySet set,
                       const LocalTrainConfig& tc, tk::AdamW& opt, Rng& shuffle, const MinibatchHook* hook,
                       const tk::AdamW::Filter& extra_filter) {
    require(!samples.empty(), "local_epoch: empty client dataset");
    require(tc.batch_size >= 1, "local_epoch: batch_size must be >= 1");
    const auto order = shuffle.permutation(samples.size());
    const auto filter = [&](std::string_view n) { return owned_by(n, set) && (!extra_filter || extra_filter(n)); };
    LocalStats st;
    const auto bs = static_cast<std::size_t>(tc.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
        std::vector<const air::ModalitySample*> mb;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i)
            mb.push_back(samples[order[i]]);
        const Batch batch = make_batch(mb, set, cfg);
        const BlockMask mask = hook && hook->mask ? hook->mask(batch) : kKeepAll;
        params.zero_grad();
        {
            Tape tape;
            Binder bind(tape, params);
            const Forward f = forward(bind, cfg, batch, set, tc.bn_mode, mask);
            Var loss = tk::bce(batch.labels, f.probs);
            st.loss += loss.value()[0];
            tape.backward(loss);
        }
        opt.step(params, filter);
        ++st.batches;
        if (hook && hook->after_step)
            hook->after_step(batch, params);
    }
    st.loss /= st.batches;
    return st;
}

double mean_bce(tk::ParameterStore& params, const VehicleConfig& cfg,
                const std::vector<const air::ModalitySample*>& samples, ModalitySet set) {
    if (samples.empty())
        return 0.0;
    const Batch b = make_batch(samples, set, cfg);
    Tape tape;
    Binder bind(tape, params, true);
    return tk::bce(b.labels, forward(bind, cfg, b, set, BnMode::eval).probs).value()[0];
}

}  // namespace beamgraph::veh

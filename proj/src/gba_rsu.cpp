// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/gba_rsu.hpp"

#include <cmath>
#include <numbers>

namespace beamgraph::rsu {

using tk::Binder;
using tk::DenseArray;
using tk::Tape;
using tk::Var;

Eigen::MatrixXi adjacency_from_rows(const DenseArray& rows) {
    const auto K = static_cast<int>(rows.rows());
    const auto W = rows.cols();
    Eigen::MatrixXi a = Eigen::MatrixXi::Zero(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = i + 1; j < K; ++j)
            for (std::size_t w = 0; w < W; ++w)
                if (rows(i, w) > 0.5 && rows(j, w) > 0.5) {
                    a(i, j) = a(j, i) = 1;
                    break;
                }
    return a;
}

FeedbackGraph build_graph(const air::FeedbackMatrix& v) {
    FeedbackGraph g;
    g.w = static_cast<int>(v.rows());
    g.k = static_cast<int>(v.cols());
    g.features = DenseArray({static_cast<std::size_t>(g.k), static_cast<std::size_t>(g.w)});
    for (int k = 0; k < g.k; ++k)
        for (int w = 0; w < g.w; ++w) {
            require(v(w, k) == 0 || v(w, k) == 1, "build_graph: feedback must be binary");
            g.features(k, w) = v(w, k);
        }
    g.adjacency = adjacency_from_rows(g.features);
    for (int k = 0; k < g.k; ++k)
        for (int i = 0; i < g.k; ++i)
            if (g.adjacency(k, i)) {
                g.src.push_back(k);
                g.dst.push_back(i);
            }
    return g;
}

void ProjectionConfig::validate() const {
    require(tau > 0, "projection: tau must be positive");
    require(prune_fraction >= 0 && prune_fraction < 1, "projection: prune_fraction must lie in [0, 1)");
    require(p_max > 0, "projection: p_max must be positive");
}

namespace {

void add_mlp(tk::ParameterStore& s, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
             Rng& rng) {
    tk::add_affine(s, name + "/l0", in, hidden, rng);
    tk::add_affine(s, name + "/l1", hidden, out, rng);
}

Var mlp(Binder& bind, const std::string& name, Var x) {
    Var h = tk::relu(tk::affine(x, bind(name + "/l0/w"), bind(name + "/l0/b")));
    return tk::affine(h, bind(name + "/l1/w"), bind(name + "/l1/b"));
}

}  // namespace

tk::ParameterStore init_rsu_params(const RsuConfig& cfg, Rng& rng) {
    require(cfg.w >= 1 && cfg.d_g >= 1 && cfg.hidden >= 1, "rsu config: widths must be >= 1");
    tk::ParameterStore s;
    const auto w = static_cast<std::size_t>(cfg.w), dg = static_cast<std::size_t>(cfg.d_g),
               hd = static_cast<std::size_t>(cfg.hidden);
    add_mlp(s, "rsu/edge", 2 * w, hd, dg, rng);
    add_mlp(s, "rsu/self", w, hd, dg, rng);
    add_mlp(s, "rsu/cross", 2 * dg, hd, dg, rng);
    add_mlp(s, "rsu/proj", dg, hd, w, rng);
    return s;
}

RsuConfig infer_rsu_config(const tk::ParameterStore& params) {
    RsuConfig c;
    const auto& self_w = params.at("rsu/self/l0/w").value;
    c.w = static_cast<int>(self_w.cols());
    c.hidden = static_cast<int>(self_w.rows());
    c.d_g = static_cast<int>(params.at("rsu/self/l1/w").value.rows());
    return c;
}

Var rsu_logits(Binder& bind, Var node_rows, const Eigen::MatrixXi& adjacency) {
    const auto K = node_rows.value().rows();
    require(adjacency.rows() == static_cast<int>(K) && adjacency.cols() == static_cast<int>(K),
            "rsu_logits: adjacency does not match the vertex count");
    std::vector<std::size_t> src, dst;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < K; ++i)
            if (adjacency(static_cast<int>(k), static_cast<int>(i)))
                src.push_back(k), dst.push_back(i);

    Var self = mlp(bind, "rsu/self", node_rows);
    const std::size_t dg = self.value().cols();
    Var aggregated;
    if (src.empty()) {
        aggregated = bind.tape().constant(DenseArray({K, dg}));
    } else {
        Var edge_in = tk::concat_cols(tk::gather_rows(node_rows, src), tk::gather_rows(node_rows, dst));
        aggregated = tk::segment_mean(mlp(bind, "rsu/edge", edge_in), src, K);
    }
    Var vertex = mlp(bind, "rsu/cross", tk::concat_cols(self, aggregated));
    return mlp(bind, "rsu/proj", vertex);
}

Var beam_project(Var z, const ProjectionConfig& cfg) {
    cfg.validate();
    Tape& tape = z.tape();
    const std::size_t K = z.value().rows(), W = z.value().cols();
    Var znon = cfg.non_negativity ? tk::abs(z) : z;

    DenseArray hard({K, W});
    for (std::size_t k = 0; k < K; ++k) {
        const auto row = znon.value().row(k);
        std::size_t best = 0;
        for (std::size_t w = 1; w < W; ++w)
            if (row[w] > row[best])
                best = w;
        hard(k, best) = 1.0;
    }
    Var mix = tk::straight_through_mix(tape.constant(std::move(hard)), tk::softmax_t(znon, cfg.tau));
    Var zhat = tk::mul(znon, mix);
    if (!cfg.re_normalization)
        return zhat;

    std::vector<double> share(K, 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        for (double v : zhat.value().row(k))
            share[k] += v * v;
        total += share[k];
    }
    DenseArray keep({K});
    bool any = false;
    for (std::size_t k = 0; k < K; ++k) {
        keep[k] = (total > 0.0 && share[k] / total >= cfg.prune_fraction) ? 1.0 : 0.0;
        any = any || keep[k] > 0.0;
    }
    if (!any)
        return tape.constant(DenseArray({K, W}));
    Var kept = tk::mul_rows(zhat, tape.constant(std::move(keep)));
    Var inv_norm = tk::pow_scalar(tk::sum(tk::square(kept)), -0.5);
    return tk::scale(tk::mul_scalar(kept, inv_norm), std::sqrt(cfg.p_max));
}

Var rsu_policy(Binder& bind, Var node_rows, const Eigen::MatrixXi& adjacency, const ProjectionConfig& cfg) {
    return beam_project(rsu_logits(bind, node_rows, adjacency), cfg);
}

namespace {

struct RateTerms {
    Eigen::MatrixXcd a;  // a(k, i) = sum_w G(k, w) t(i, w)
    Eigen::VectorXd d, in;  // total received power and interference-plus-noise per user
};

RateTerms rate_terms(const DenseArray& t, const Eigen::MatrixXcd& g, double sigma2) {
    const auto K = static_cast<int>(t.rows());
    const auto W = static_cast<int>(t.cols());
    RateTerms r;
    r.a = Eigen::MatrixXcd::Zero(K, K);
    for (int k = 0; k < K; ++k)
        for (int i = 0; i < K; ++i) {
            air::cd acc = 0.0;
            for (int w = 0; w < W; ++w)
                acc += g(k, w) * t(i, w);
            r.a(k, i) = acc;
        }
    r.d.resize(K);
    r.in.resize(K);
    for (int k = 0; k < K; ++k) {
        double total = sigma2;
        for (int i = 0; i < K; ++i)
            total += std::norm(r.a(k, i));
        r.d(k) = total;
        r.in(k) = total - std::norm(r.a(k, k));
    }
    return r;
}

}  // namespace

Var user_rates(Var t_rows, const Eigen::MatrixXcd& g, double sigma2) {
    const auto& T = t_rows.value();
    require(T.rank() == 2 && static_cast<int>(T.rows()) == g.rows() && static_cast<int>(T.cols()) == g.cols(),
            "user_rates: strategy rows must match the K x W beam-domain channel");
    require(sigma2 > 0, "user_rates: sigma2 must be positive");
    const auto K = static_cast<int>(T.rows());
    const auto W = static_cast<int>(T.cols());
    const RateTerms terms = rate_terms(T, g, sigma2);
    DenseArray rates({static_cast<std::size_t>(K)});
    for (int k = 0; k < K; ++k)
        rates[k] = std::log2(terms.d(k)) - std::log2(std::max(terms.in(k), 1e-300));
    const auto ti = t_rows.id();
    return t_rows.tape().record(std::move(rates), {t_rows}, [ti, g, terms, K, W](Tape& tape, std::size_t self) {
        if (!tape.requires_grad(ti))
            return;
        const auto& up = tape.grad(self);
        auto& gt = tape.grad(ti);
        const double inv_ln2 = 1.0 / std::numbers::ln2;
        for (int k = 0; k < K; ++k) {
            if (up[k] == 0.0)
                continue;
            for (int i = 0; i < K; ++i) {
                const double dp = up[k] * inv_ln2 * (1.0 / terms.d(k) - (i != k ? 1.0 / terms.in(k) : 0.0));
                for (int w = 0; w < W; ++w)
                    gt(i, w) += dp * 2.0 * std::real(std::conj(terms.a(k, i)) * g(k, w));
            }
        }
    });
}

Var rate_loss(Var t_rows, const Eigen::MatrixXcd& g, double sigma2) {
    return tk::scale(tk::sum(user_rates(t_rows, g, sigma2)), -1.0);
}

air::Strategy rsu_forward(const FeedbackGraph& graph, tk::ParameterStore& params, const ProjectionConfig& cfg) {
    air::Strategy out = air::Strategy::Zero(graph.w, graph.k);
    if (graph.k == 0)
        return out;
    Tape tape;
    Binder bind(tape, params, true);
    Var t = rsu_policy(bind, tape.constant(graph.features), graph.adjacency, cfg);
    for (int k = 0; k < graph.k; ++k)
        for (int w = 0; w < graph.w; ++w)
            out(w, k) = t.value()(k, w);
    return out;
}

air::Strategy rsu_forward(const air::FeedbackMatrix& v, tk::ParameterStore& params, const ProjectionConfig& cfg) {
    return rsu_forward(build_graph(v), params, cfg);
}

air::Strategy scale_to_budget(const air::Strategy& t, double p_max) {
    const double p = t.squaredNorm();
    if (p <= p_max)
        return t;
    return t * std::sqrt(p_max / p);
}

Snapshot perturb(const Snapshot& s, double p_drop, double p_error, Rng& rng) {
    require(p_drop >= 0 && p_drop < 1, "perturb: p_drop must lie in [0, 1)");
    require(p_error >= 0 && p_error < 1, "perturb: p_error must lie in [0, 1)");
    const auto W = static_cast<int>(s.v.rows());
    const auto K = static_cast<int>(s.v.cols());
    air::FeedbackMatrix v = s.v;
    if (p_error > 0)
        for (int k = 0; k < K; ++k)
            for (int w = 0; w < W; ++w)
                if (rng.bernoulli(p_error))
                    v(w, k) ^= 1;
    std::vector<int> kept;
    for (int k = 0; k < K; ++k)
        if (!(p_drop > 0 && rng.bernoulli(p_drop)))
            kept.push_back(k);
    Snapshot out;
    out.v.resize(W, static_cast<int>(kept.size()));
    out.g.resize(static_cast<int>(kept.size()), s.g.cols());
    for (std::size_t j = 0; j < kept.size(); ++j) {
        out.v.col(static_cast<int>(j)) = v.col(kept[j]);
        out.g.row(static_cast<int>(j)) = s.g.row(kept[j]);
    }
    return out;
}

namespace {

TrainResult run_training(const std::vector<Snapshot>& data, tk::ParameterStore params, const TrainConfig& cfg,
                         std::uint64_t seed, const std::string& stage) {
    require(!data.empty(), stage + ": empty dataset");
    require(cfg.epochs >= 1 && cfg.batch_size >= 1, stage + ": epochs and batch_size must be >= 1");
    cfg.projection.validate();
    Rng order_rng = Rng::substream(seed, stage + ":rsu:order");
    Rng perturb_rng = Rng::substream(seed, stage + ":rsu:perturb");
    tk::AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    TrainResult result;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto order = order_rng.permutation(data.size());
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            params.zero_grad();
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t b = start; b < end; ++b) {
                Snapshot s = perturb(data[order[b]], cfg.p_drop, cfg.p_error, perturb_rng);
                if (s.v.cols() == 0)
                    continue;
                const FeedbackGraph graph = build_graph(s.v);
                Tape tape;
                Binder bind(tape, params);
                Var t = rsu_policy(bind, tape.constant(graph.features), graph.adjacency, cfg.projection);
                Var loss = rate_loss(t, s.g, cfg.sigma2);
                loss_sum += loss.value()[0];
                tape.backward(tk::scale(loss, inv));
            }
            opt.step(params);
        }
        EpochStats st;
        st.epoch = epoch;
        st.loss = loss_sum / static_cast<double>(data.size());
        st.sum_rate = mean_sum_rate(data, params, cfg.projection, cfg.sigma2);
        result.trace.push_back(st);
    }
    result.params = std::move(params);
    return result;
}

}  // namespace

TrainResult train_stage1(const std::vector<Snapshot>& data, const RsuConfig& model, const TrainConfig& cfg,
                         std::uint64_t seed) {
    Rng init = Rng::substream(seed, "stage1:rsu:init");
    return run_training(data, init_rsu_params(model, init), cfg, seed, "stage1");
}

TrainResult retrain_stage3(const std::vector<Snapshot>& predicted, const std::vector<Snapshot>& ground_truth,
                           tk::ParameterStore params, const TrainConfig& cfg, std::uint64_t seed) {
    std::vector<Snapshot> mixed = predicted;
    mixed.insert(mixed.end(), ground_truth.begin(), ground_truth.end());
    return run_training(mixed, std::move(params), cfg, seed, "stage3");
}

double mean_sum_rate(const std::vector<Snapshot>& data, tk::ParameterStore& params, const ProjectionConfig& cfg,
                     double sigma2) {
    if (data.empty())
        return 0.0;
    double total = 0.0;
    for (const auto& s : data) {
        if (s.v.cols() == 0)
            continue;
        const auto t = scale_to_budget(rsu_forward(s.v, params, cfg), cfg.p_max);
        total += air::sum_rate(s.g, t, sigma2).total;
    }
    return total / static_cast<double>(data.size());
}

std::vector<Snapshot> snapshots_from(const air::Dataset& d) {
    std::vector<Snapshot> out;
    for (int t = 0; t < d.timesteps(); ++t)
        out.push_back({d.feedback_at(t), air::beam_domain(d.channels_at(t), d.codebook)});
    return out;
}

}  // namespace beamgraph::rsu

// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/verify.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <sstream>
#include <thread>

#include "beamgraph/autodiff.hpp"
#include "beamgraph/balance.hpp"
#include "beamgraph/gba_rsu.hpp"

namespace beamgraph::verify {

using tk::DenseArray;
using tk::Tape;
using tk::Var;

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
    threads = std::clamp(threads, 1, std::max(1, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i)
            body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error)
                        error = std::current_exception();
                }
            }
        });
    for (auto& th : pool)
        th.join();
    if (error)
        std::rethrow_exception(error);
}

int thread_budget() {
    const char* env = std::getenv("BEAMGRAPH_THREADS");
    if (env == nullptr || *env == '\0')
        return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    require(end != nullptr && *end == '\0' && v >= 1, std::string("BEAMGRAPH_THREADS must be a positive integer, got '") +
                                                          env + "'");
    const long hw = std::max(1u, std::thread::hardware_concurrency());
    return static_cast<int>(std::min(v, hw));
}

namespace {

using Clock = std::chrono::steady_clock;

// Per-trial error collected into a slot, then folded into a SuiteResult.
struct Trials {
    std::vector<double> err;
    std::vector<std::string> note;
    explicit Trials(int n) : err(static_cast<std::size_t>(n), 0.0), note(static_cast<std::size_t>(n)) {}
};

SuiteResult fold(std::string name, const Trials& t, double tol, std::string metric, Clock::time_point start,
                 const std::function<bool(int)>& failed) {
    SuiteResult r;
    r.name = std::move(name);
    r.trials = static_cast<int>(t.err.size());
    r.tolerance = tol;
    r.metric = std::move(metric);
    for (int i = 0; i < r.trials; ++i) {
        r.worst = std::max(r.worst, t.err[i]);
        if (failed(i)) {
            if (r.failures == 0)
                r.detail = "trial " + std::to_string(i) + ": " + t.note[i];
            ++r.failures;
        }
    }
    r.pass = r.failures == 0;
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return r;
}

air::FeedbackMatrix random_feedback(int w, int k, Rng& rng, double p) {
    air::FeedbackMatrix v(w, k);
    for (int i = 0; i < w; ++i)
        for (int j = 0; j < k; ++j)
            v(i, j) = rng.bernoulli(p) ? 1 : 0;
    return v;
}

DenseArray random_array(const tk::Shape& shape, Rng& rng, double lo, double hi) {
    DenseArray a(shape);
    for (auto& v : a.values())
        v = rng.uniform(lo, hi);
    return a;
}

Eigen::MatrixXcd random_g(int k, int w, Rng& rng) {
    Eigen::MatrixXcd g(k, w);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < w; ++j)
            g(i, j) = air::cd(rng.normal(), rng.normal()) * 0.3;
    return g;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest relative error of reverse-mode gradients of sum(weights * f) against
// central differences; `surrogate`, when set, is what gets differenced.
double fd_rel_error(const Builder& f, std::vector<DenseArray> inputs, Rng& rng, const Builder& surrogate,
                    double step = 1e-5, double floor = 1e-6) {
    DenseArray weights;
    auto evaluate = [&](const std::vector<DenseArray>& xs, std::vector<DenseArray>* grads) {
        Tape t;
        std::vector<Var> vars;
        for (const auto& x : xs)
            vars.push_back(t.variable(x));
        Var out = (grads == nullptr && surrogate) ? surrogate(t, vars) : f(t, vars);
        if (weights.empty())
            weights = random_array(out.shape(), rng, 0.5, 1.5);
        Var loss = tk::sum(tk::mul(out, t.constant(weights)));
        if (grads) {
            t.backward(loss);
            for (const auto& v : vars)
                grads->push_back(v.grad());
        }
        return loss.value()[0];
    };
    std::vector<DenseArray> analytic;
    evaluate(inputs, &analytic);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            inputs[k][i] = x0 + step;
            const double fp = evaluate(inputs, nullptr);
            inputs[k][i] = x0 - step;
            const double fm = evaluate(inputs, nullptr);
            inputs[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
        }
    return worst;
}

struct GradCase {
    std::string name;
    Builder build;
    std::vector<tk::Shape> shapes;
    double lo = -1.0, hi = 1.0;
    // Called once per seed before differencing; returns the surrogate (may be empty).
    std::function<Builder(const std::vector<DenseArray>&)> surrogate = {};
};

// Projection surrogate: hard choice, soft weights at the base point and the
// pruning mask are frozen, so the forward pass is smooth in z and its
// derivative is exactly what the straight-through backward computes.
Builder projection_surrogate(const DenseArray& z0, const rsu::ProjectionConfig& cfg) {
    Tape t;
    Var z = t.constant(z0);
    Var znon = cfg.non_negativity ? tk::abs(z) : z;
    const std::size_t K = z0.rows(), W = z0.cols();
    DenseArray hard({K, W});
    for (std::size_t k = 0; k < K; ++k) {
        const auto row = znon.value().row(k);
        hard(k, static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())) = 1.0;
    }
    const DenseArray soft0 = tk::softmax_t(znon, cfg.tau).value();
    DenseArray keep({K});
    {
        DenseArray zhat = znon.value();
        std::vector<double> share(K, 0.0);
        double total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t w = 0; w < W; ++w) {
                zhat(k, w) *= hard(k, w);
                share[k] += zhat(k, w) * zhat(k, w);
            }
            total += share[k];
        }
        for (std::size_t k = 0; k < K; ++k)
            keep[k] = (total > 0.0 && share[k] / total >= cfg.prune_fraction) ? 1.0 : 0.0;
    }
    return [=](Tape& tape, const std::vector<Var>& v) {
        Var zn = cfg.non_negativity ? tk::abs(v[0]) : v[0];
        Var mix = tk::add(tape.constant(hard), tk::sub(tk::softmax_t(zn, cfg.tau), tape.constant(soft0)));
        Var zhat = tk::mul(zn, mix);
        if (!cfg.re_normalization)
            return zhat;
        Var kept = tk::mul_rows(zhat, tape.constant(keep));
        Var inv = tk::pow_scalar(tk::sum(tk::square(kept)), -0.5);
        return tk::scale(tk::mul_scalar(kept, inv), std::sqrt(cfg.p_max));
    };
}

std::vector<GradCase> gradient_cases() {
    using V = const std::vector<Var>&;
    std::vector<GradCase> c = {
        {"add", [](Tape&, V v) { return tk::add(v[0], v[1]); }, {{3, 2}, {3, 2}}},
        {"sub", [](Tape&, V v) { return tk::sub(v[0], v[1]); }, {{4}, {4}}},
        {"mul", [](Tape&, V v) { return tk::mul(v[0], v[1]); }, {{3, 2}, {3, 2}}},
        {"scale", [](Tape&, V v) { return tk::scale(v[0], -1.7); }, {{5}}},
        {"add_scalar", [](Tape&, V v) { return tk::add_scalar(v[0], 0.3); }, {{5}}},
        {"affine", [](Tape&, V v) { return tk::affine(v[0], v[1], v[2]); }, {{5, 4}, {3, 4}, {3}}},
        {"matmul", [](Tape&, V v) { return tk::matmul(v[0], v[1]); }, {{3, 4}, {4, 2}}},
        {"transpose", [](Tape&, V v) { return tk::transpose(v[0]); }, {{3, 4}}},
        {"reshape", [](Tape&, V v) { return tk::reshape(v[0], {2, 6}); }, {{3, 4}}},
        {"relu", [](Tape&, V v) { return tk::relu(v[0]); }, {{12}}},
        {"sigmoid", [](Tape&, V v) { return tk::sigmoid(v[0]); }, {{4, 3}}, -4, 4},
        {"square", [](Tape&, V v) { return tk::square(v[0]); }, {{6}}},
        {"sqrt", [](Tape&, V v) { return tk::sqrt(v[0]); }, {{6}}, 0.2, 3.0},
        {"abs", [](Tape&, V v) { return tk::abs(v[0]); }, {{8}}},
        {"pow_scalar", [](Tape&, V v) { return tk::pow_scalar(v[0], 1.5); }, {{6}}, 0.2, 3.0},
        {"softmax_t", [](Tape&, V v) { return tk::softmax_t(v[0], 0.7); }, {{3, 5}}, -3, 3},
        {"concat", [](Tape&, V v) { return tk::concat({v[0], v[1]}); }, {{3}, {2}}},
        {"concat_cols", [](Tape&, V v) { return tk::concat_cols(v[0], v[1]); }, {{3, 2}, {3, 4}}},
        {"gather", [](Tape&, V v) { return tk::gather(v[0], {2, 0, 2, 3}); }, {{4}}},
        {"gather_rows", [](Tape&, V v) { return tk::gather_rows(v[0], {1, 1, 0}); }, {{3, 2}}},
        {"scatter_rows", [](Tape&, V v) { return tk::scatter_rows(v[0], {3, 0}, 5); }, {{2, 3}}},
        {"segment_mean", [](Tape&, V v) { return tk::segment_mean(v[0], {0, 2, 0, 2, 2}, 4); }, {{5, 3}}},
        {"mean_rows", [](Tape&, V v) { return tk::mean_rows(v[0]); }, {{4, 3}}},
        {"sum", [](Tape&, V v) { return tk::sum(v[0]); }, {{4, 3}}},
        {"row_sum", [](Tape&, V v) { return tk::row_sum(v[0]); }, {{4, 3}}},
        {"column_mean", [](Tape&, V v) { return tk::column_mean(v[0]); }, {{5, 3}}},
        {"column_var", [](Tape&, V v) { return tk::column_var(v[0]); }, {{5, 3}}},
        {"mul_scalar", [](Tape&, V v) { return tk::mul_scalar(v[0], v[1]); }, {{2, 3}, {1}}},
        {"mul_rows", [](Tape&, V v) { return tk::mul_rows(v[0], v[1]); }, {{4, 3}, {4}}},
        {"bce",
         [](Tape&, V v) { return tk::bce(DenseArray::matrix(2, 3, {1, 0, 1, 0, 0, 1}), tk::sigmoid(v[0])); },
         {{2, 3}},
         -3,
         3},
        {"batch_norm train",
         [](Tape&, V v) {
             DenseArray rm({3}), rv({3}, 1.0);
             return tk::batch_norm(v[0], v[1], v[2], rm, rv, 0.1, 1e-5, tk::BnMode::train);
         },
         {{6, 3}, {3}, {3}}},
        {"batch_norm eval",
         [](Tape&, V v) {
             DenseArray rm = DenseArray::vector({0.1, -0.2, 0.3}), rv = DenseArray::vector({0.5, 2.0, 1.0});
             return tk::batch_norm(v[0], v[1], v[2], rm, rv, 0.1, 1e-5, tk::BnMode::eval);
         },
         {{4, 3}, {3}, {3}}},
        {"straight_through_mix",
         [](Tape& t, V v) { return tk::straight_through_mix(t.constant(DenseArray({2, 3}, 1.0)), tk::softmax_t(v[0], 0.5)); },
         {{2, 3}},
         -1,
         1,
         [](const std::vector<DenseArray>&) -> Builder {
             return [](Tape&, V v) { return tk::softmax_t(v[0], 0.5); };
         }},
    };
    for (double sigma2 : {0.1, 1.0}) {
        const std::string s = sigma2 == 0.1 ? "0.1" : "1";
        c.push_back({"user_rates sigma2=" + s,
                     [sigma2](Tape&, V v) {
                         Rng g_rng(77);
                         return rsu::user_rates(v[0], random_g(3, 4, g_rng), sigma2);
                     },
                     {{3, 4}}});
    }
    for (bool nonneg : {true, false})
        for (bool renorm : {true, false})
            for (double tau : {0.5, 1.0}) {
                rsu::ProjectionConfig cfg;
                cfg.non_negativity = nonneg;
                cfg.re_normalization = renorm;
                cfg.tau = tau;
                cfg.p_max = 2.0;
                std::ostringstream name;
                name << "beam_project nonneg=" << nonneg << " renorm=" << renorm << " tau=" << tau;
                // Without the absolute value, negative logits can win the argmax; keep inputs positive there.
                const double lo = nonneg ? -1.0 : 0.1;
                c.push_back({name.str(), [cfg](Tape&, V v) { return rsu::beam_project(v[0], cfg); }, {{3, 5}}, lo, 1.0,
                             [cfg](const std::vector<DenseArray>& in) { return projection_surrogate(in[0], cfg); }});
            }
    return c;
}

}  // namespace

SuiteResult prop1(std::uint64_t seed, int trials, double tol, int threads) {
    const auto start = Clock::now();
    Trials t(trials);
    parallel_for(trials, threads, [&](int i) {
        Rng rng = Rng::substream(seed, "verify:prop1:" + std::to_string(i));
        const int K = 2 + static_cast<int>(rng.index(7));
        const int n = 2 + static_cast<int>(rng.index(7)), w = 2 + static_cast<int>(rng.index(15));
        air::ChannelSet h(n, K);
        for (int a = 0; a < n; ++a)
            for (int k = 0; k < K; ++k)
                h(a, k) = {rng.normal(), rng.normal()};
        air::Strategy s = air::Strategy::Zero(w, K);
        for (int k = 0; k < K; ++k)
            s(static_cast<int>(rng.index(static_cast<std::size_t>(w))), k) = rng.uniform();
        const auto perm = rng.permutation(static_cast<std::size_t>(K));
        air::ChannelSet hp(n, K);
        air::Strategy sp(w, K);
        for (int k = 0; k < K; ++k) {
            hp.col(k) = h.col(static_cast<int>(perm[k]));
            sp.col(k) = s.col(static_cast<int>(perm[k]));
        }
        const auto c = air::make_codebook(n, w);
        const double sigma2 = rng.uniform(0.01, 1.0);
        t.err[i] = std::abs(air::sum_rate(h, c, s, sigma2).total - air::sum_rate(hp, c, sp, sigma2).total);
        t.note[i] = "K=" + std::to_string(K) + " |diff|=" + std::to_string(t.err[i]);
    });
    return fold("prop1", t, tol, "abs sum-rate difference", start, [&](int i) { return !(t.err[i] < tol); });
}

SuiteResult prop2(std::uint64_t seed, int trials, double tol, const tk::ParameterStore* params, int threads) {
    const auto start = Clock::now();
    Trials t(trials);
    const int w = params ? rsu::infer_rsu_config(*params).w : 8;
    parallel_for(trials, threads, [&](int i) {
        Rng rng = Rng::substream(seed, "verify:prop2:" + std::to_string(i));
        tk::ParameterStore p = params ? *params : rsu::init_rsu_params({.w = w, .d_g = 16, .hidden = 16}, rng);
        const int K = 2 + static_cast<int>(rng.index(7));
        const auto v = random_feedback(w, K, rng, 0.3);
        const auto perm = rng.permutation(static_cast<std::size_t>(K));
        air::FeedbackMatrix vp(w, K);
        for (int j = 0; j < K; ++j)
            vp.col(j) = v.col(static_cast<int>(perm[j]));
        double err = 0.0;
        for (bool renorm : {true, false}) {
            rsu::ProjectionConfig cfg;
            cfg.re_normalization = renorm;
            const auto a = rsu::rsu_forward(v, p, cfg);
            const auto b = rsu::rsu_forward(vp, p, cfg);
            for (int j = 0; j < K; ++j)
                err = std::max(err, (b.col(j) - a.col(static_cast<int>(perm[j]))).cwiseAbs().maxCoeff());
        }
        t.err[i] = err;
        t.note[i] = "K=" + std::to_string(K) + " max|diff|=" + std::to_string(err);
    });
    return fold("prop2", t, tol, "max abs entry difference", start, [&](int i) { return !(t.err[i] < tol); });
}

SuiteResult prop3(std::uint64_t seed, int trials, int threads) {
    const auto start = Clock::now();
    Trials t(trials);
    std::vector<char> bound_ok(static_cast<std::size_t>(trials), 0);
    parallel_for(trials, threads, [&](int i) {
        Rng rng = Rng::substream(seed, "verify:prop3:" + std::to_string(i));
        const int n = 1 + static_cast<int>(rng.index(6));
        const int m = 1 + static_cast<int>(rng.index(6));
        Eigen::VectorXd mu(n), sd(n), mu_hat(n), sd_hat(n);
        Eigen::MatrixXd L(m, n);
        for (int j = 0; j < n; ++j) {
            mu(j) = rng.normal();
            sd(j) = rng.uniform(0.1, 2.0);
            mu_hat(j) = mu(j) + rng.normal(0.0, 0.5);
            sd_hat(j) = rng.uniform(0.1, 2.0);
        }
        for (Eigen::Index j = 0; j < L.size(); ++j)
            L.data()[j] = rng.normal();
        const auto r = bal::gradient_bound_check(mu, sd, mu_hat, sd_hat, L, 2000, derive_seed(seed, std::to_string(i)));
        double w2sq = 0.0;
        for (int j = 0; j < n; ++j)
            w2sq += (mu(j) - mu_hat(j)) * (mu(j) - mu_hat(j)) + (sd(j) - sd_hat(j)) * (sd(j) - sd_hat(j));
        t.err[i] = std::abs(r.w2 - std::sqrt(w2sq));
        bound_ok[i] = r.bound_ok && t.err[i] <= 1e-12;
        std::ostringstream os;
        os << "w2 err " << t.err[i] << " gap " << r.grad_gap << " bound " << r.lipschitz * r.w2 << " + 3*"
           << r.stderr_;
        t.note[i] = os.str();
    });
    return fold("prop3", t, 1e-12, "abs W2 difference (bound checked per trial)", start,
                [&](int i) { return !bound_ok[i]; });
}

SuiteResult gradients(std::uint64_t seed, int seeds, double tol) {
    const auto start = Clock::now();
    const auto cases = gradient_cases();
    Trials t(static_cast<int>(cases.size()) * seeds);
    for (std::size_t c = 0; c < cases.size(); ++c)
        for (int s = 0; s < seeds; ++s) {
            const int i = static_cast<int>(c) * seeds + s;
            Rng rng = Rng::substream(seed, "verify:grad:" + cases[c].name + ":" + std::to_string(s));
            std::vector<DenseArray> inputs;
            for (const auto& shape : cases[c].shapes)
                inputs.push_back(random_array(shape, rng, cases[c].lo, cases[c].hi));
            const Builder sur = cases[c].surrogate ? cases[c].surrogate(inputs) : Builder{};
            t.err[i] = fd_rel_error(cases[c].build, inputs, rng, sur);
            t.note[i] = cases[c].name + " seed " + std::to_string(s) + " rel err " + std::to_string(t.err[i]);
        }
    auto r = fold("grad", t, tol, "max relative gradient error", start, [&](int i) { return !(t.err[i] < tol); });
    r.detail = std::to_string(cases.size()) + " cases x " + std::to_string(seeds) + " seeds" +
               (r.detail.empty() ? "" : "; first failure " + r.detail);
    return r;
}

SuiteResult constraints(std::uint64_t seed, int calls, double tol, int threads) {
    const auto start = Clock::now();
    Trials t(calls);
    std::vector<char> ok(static_cast<std::size_t>(calls), 0);
    parallel_for(calls, threads, [&](int i) {
        Rng rng = Rng::substream(seed, "verify:constraints:" + std::to_string(i));
        const int w = 2 + static_cast<int>(rng.index(11));
        const int K = 1 + static_cast<int>(rng.index(8));
        auto p = rsu::init_rsu_params({.w = w, .d_g = 8, .hidden = 8}, rng);
        rsu::ProjectionConfig cfg;
        cfg.p_max = rng.uniform(0.5, 4.0);
        const auto s = rsu::rsu_forward(random_feedback(w, K, rng, rng.uniform(0.1, 0.6)), p, cfg);
        bool support = true;
        for (int k = 0; k < K; ++k) {
            int nz = 0;
            for (int b = 0; b < w; ++b) {
                nz += s(b, k) != 0.0;
                support = support && s(b, k) >= 0.0;
            }
            support = support && nz <= 1;
        }
        const double power = s.squaredNorm();
        const double err = power == 0.0 ? 0.0 : std::abs(power - cfg.p_max);
        t.err[i] = err;
        ok[i] = support && err <= tol;
        t.note[i] = "K=" + std::to_string(K) + " W=" + std::to_string(w) + " power " + std::to_string(power) +
                    (support ? "" : " (column support violated)");
    });
    return fold("constraints", t, tol, "abs power error", start, [&](int i) { return !ok[i]; });
}

std::vector<SuiteResult> run(const std::string& name, std::uint64_t seed, int trials, int threads) {
    const bool all = name == "all";
    require(all || name == "prop1" || name == "prop2" || name == "prop3" || name == "grad" || name == "constraints",
            "unknown verification suite '" + name + "' (expected prop1, prop2, prop3, grad, constraints or all)");
    auto n = [trials](int fallback) { return trials > 0 ? trials : fallback; };
    std::vector<SuiteResult> out;
    if (all || name == "prop1")
        out.push_back(prop1(seed, n(100), 1e-9, threads));
    if (all || name == "prop2")
        out.push_back(prop2(seed, n(100), 1e-6, nullptr, threads));
    if (all || name == "prop3")
        out.push_back(prop3(seed, n(100), threads));
    if (all || name == "grad")
        out.push_back(gradients(seed, n(20)));
    if (all || name == "constraints")
        out.push_back(constraints(seed, n(1000), 1e-9, threads));
    return out;
}

std::string format(const SuiteResult& r) {
    std::ostringstream os;
    os << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.trials << " trials, " << r.failures
       << " failures, worst " << r.metric << " " << r.worst << " (tol " << r.tolerance << "), " << r.seconds << " s";
    if (!r.detail.empty())
        os << " [" << r.detail << "]";
    return os.str();
}

}  // namespace beamgraph::verify

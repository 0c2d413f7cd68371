// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the test binaries.
#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <cmath>
#include <functional>
#include <vector>

#include "beamgraph/airsim.hpp"
#include "beamgraph/autodiff.hpp"
#include "beamgraph/rng.hpp"

namespace testsupport {

using beamgraph::Rng;
using beamgraph::tk::DenseArray;
using beamgraph::tk::Tape;
using beamgraph::tk::Var;

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline DenseArray random_array(beamgraph::tk::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    DenseArray a(std::move(shape));
    for (auto& v : a.values())
        v = rng.uniform(lo, hi);
    return a;
}

// Largest elementwise relative error between reverse-mode gradients and central
// differences of the scalar sum(weights * f(inputs)). Elements are compared as
// |a - n| / max(|a|, |n|, floor). When `surrogate` is given, the numeric side
// differentiates it instead of `f` (straight-through paths have a flat forward).
inline double fd_max_rel_error(const Builder& f, std::vector<DenseArray> inputs, Rng& rng, double step = 1e-5,
                               double floor = 1e-6, const Builder& surrogate = {}) {
    DenseArray weights;
    auto evaluate = [&](const std::vector<DenseArray>& xs, std::vector<DenseArray>* grads) {
        Tape t;
        std::vector<Var> vars;
        for (const auto& x : xs)
            vars.push_back(t.variable(x));
        Var out = (grads == nullptr && surrogate) ? surrogate(t, vars) : f(t, vars);
        if (weights.empty())
            weights = random_array(out.shape(), rng, 0.5, 1.5);
        Var loss = beamgraph::tk::sum(beamgraph::tk::mul(out, t.constant(weights)));
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
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            inputs[k][i] = x0 + step;
            const double fp = evaluate(inputs, nullptr);
            inputs[k][i] = x0 - step;
            const double fm = evaluate(inputs, nullptr);
            inputs[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

// Same comparison for named entries of a parameter store. `loss(store, true)`
// must leave d loss / d entry in the store's grads; `loss(store, false)` only
// evaluates.
inline double param_fd_max_rel_error(beamgraph::tk::ParameterStore& store, const std::vector<std::string>& names,
                                     const std::function<double(beamgraph::tk::ParameterStore&, bool)>& loss,
                                     double step = 1e-6, double floor = 1e-6) {
    store.zero_grad();
    loss(store, true);
    double worst = 0.0;
    for (const auto& name : names) {
        auto& p = store.at(name);
        const DenseArray analytic = p.grad;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double x0 = p.value[i];
            p.value[i] = x0 + step;
            const double fp = loss(store, false);
            p.value[i] = x0 - step;
            const double fm = loss(store, false);
            p.value[i] = x0;
            const double numeric = (fp - fm) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

// Labelled samples whose modality-q features are strength[q] * prototype(label)
// plus unit Gaussian noise. The label is a single beam, with the next beam also
// set a third of the time.
struct ToySpec {
    int w = 4;
    std::array<int, beamgraph::air::kModalities> dims{2, 8, 16};
    std::array<double, beamgraph::air::kModalities> strength{2.0, 2.0, 2.0};
    std::array<double, beamgraph::air::kModalities> availability{1.0, 1.0, 1.0};
};

inline std::vector<beamgraph::air::ModalitySample> toy_samples(const ToySpec& spec, std::size_t n, Rng& rng,
                                                              std::uint64_t prototype_seed = 99) {
    using namespace beamgraph::air;
    Rng proto_rng(prototype_seed);
    std::array<std::vector<std::vector<double>>, kModalities> proto;
    for (int q = 0; q < kModalities; ++q)
        for (int b = 0; b < spec.w; ++b) {
            std::vector<double> v(static_cast<std::size_t>(spec.dims[q]));
            for (auto& x : v)
                x = proto_rng.normal();
            proto[q].push_back(v);
        }
    std::vector<ModalitySample> out;
    for (std::size_t i = 0; i < n; ++i) {
        ModalitySample s;
        s.t = static_cast<int>(i);
        const int b = static_cast<int>(rng.index(static_cast<std::size_t>(spec.w)));
        s.label.assign(static_cast<std::size_t>(spec.w), 0);
        s.label[b] = 1;
        const bool pair = rng.uniform() < 1.0 / 3.0;
        if (pair)
            s.label[(b + 1) % spec.w] = 1;
        for (int q = 0; q < kModalities; ++q) {
            auto& f = s.feature(q);
            f.resize(static_cast<std::size_t>(spec.dims[q]));
            for (std::size_t d = 0; d < f.size(); ++d) {
                double signal = proto[q][b][d];
                if (pair)
                    signal = 0.5 * (signal + proto[q][(b + 1) % spec.w][d]);
                f[d] = spec.strength[q] * signal + rng.normal();
            }
            s.available[q] = q == kGps || rng.uniform() < spec.availability[q];
        }
        out.push_back(std::move(s));
    }
    return out;
}

// Rewrites the features of every sample as strength[q] * M_q * label plus unit
// noise, so modality informativeness is set by `strength`.
inline void script_features(beamgraph::air::Dataset& d, const std::array<double, beamgraph::air::kModalities>& strength,
                            std::uint64_t seed) {
    namespace air = beamgraph::air;
    Rng proto(seed);
    const int w = d.scenario.cfg.w;
    std::array<std::vector<double>, air::kModalities> m;
    std::array<std::size_t, air::kModalities> dims{};
    for (int q = 0; q < air::kModalities; ++q) {
        dims[q] = d.streams[0][0].feature(q).size();
        m[q].resize(dims[q] * static_cast<std::size_t>(w));
        for (auto& v : m[q])
            v = proto.normal();
    }
    Rng noise(seed + 1);
    for (auto& stream : d.streams)
        for (auto& s : stream)
            for (int q = 0; q < air::kModalities; ++q) {
                auto& f = s.feature(q);
                for (std::size_t i = 0; i < dims[q]; ++i) {
                    double acc = 0.0;
                    for (int b = 0; b < w; ++b)
                        acc += m[q][i * w + b] * s.label[b];
                    f[i] = strength[q] * acc + noise.normal();
                }
            }
}

template <class T>
std::vector<const T*> pointers(const std::vector<T>& v) {
    std::vector<const T*> p;
    for (const auto& x : v)
        p.push_back(&x);
    return p;
}

}  // namespace testsupport

// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/optim.hpp"

#include <cmath>

namespace beamgraph::tk {

void AdamW::step(ParameterStore& store, const Filter& filter) {
    for (const auto& [name, p] : store) {
        if (!p.trainable() || (filter && !filter(name)))
            continue;
        if (!p.grad.all_finite())
            throw NumericError("AdamW: non-finite gradient in parameter '" + name + "'");
    }
    ++steps_;
    for (auto& [name, p] : store) {
        if (!p.trainable() || (filter && !filter(name)))
            continue;
        auto it = moments_.find(name);
        if (it == moments_.end())
            it = moments_.emplace(name, Moments{DenseArray::zeros_like(p.value), DenseArray::zeros_like(p.value), 0})
                     .first;
        auto& mom = it->second;
        require(mom.m.same_shape(p.value), "AdamW: parameter '" + name + "' changed shape");
        ++mom.t;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mom.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mom.t));
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g;
            mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            p.value[i] = p.value[i] * decay - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void AdamW::export_moments(ParameterStore& out, const std::string& prefix) const {
    for (const auto& [name, mom] : moments_) {
        out.add(prefix + name + "/m", mom.m, EntryKind::opt_moment);
        out.add(prefix + name + "/v", mom.v, EntryKind::opt_moment);
    }
}

void add_affine(ParameterStore& store, const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    DenseArray w({fan_out, fan_in});
    for (auto& v : w.values())
        v = rng.uniform(-a, a);
    store.add(name + "/w", std::move(w));
    store.add(name + "/b", DenseArray({fan_out}));
}

}  // namespace beamgraph::tk

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "beamgraph/params.hpp"
#include "beamgraph/rng.hpp"

namespace beamgraph::tk {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Decoupled-weight-decay Adam. Moments are created lazily per parameter name
/// so one optimizer can serve a store whose updated subset changes per call.
class AdamW {
  public:
    using Filter = std::function<bool(std::string_view)>;

    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update to every trainable entry accepted by `filter`
    // (all trainable entries when empty). Throws NumericError naming the first
    // parameter with a non-finite gradient, before touching any value.
    void step(ParameterStore& store, const Filter& filter = {});

    const AdamWConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t step_count() const noexcept { return steps_; }

    // Moments as checkpoint entries named "<prefix><param>/m" and "/v".
    void export_moments(ParameterStore& out, const std::string& prefix) const;

  private:
    struct Moments {
        DenseArray m, v;
        std::uint64_t t = 0;
    };
    AdamWConfig cfg_;
    std::uint64_t steps_ = 0;
    std::map<std::string, Moments, std::less<>> moments_;
};

// Uniform Xavier weight [fan_out x fan_in] and zero bias, added as
// "<name>/w" and "<name>/b".
void add_affine(ParameterStore& store, const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace beamgraph::tk

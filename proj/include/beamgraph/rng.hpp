// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace beamgraph {

/// Seeded generator with platform-independent draws. The standard library
/// distributions are implementation-defined, so uniform and normal variates
/// are derived from the raw 64-bit engine output here.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    // Independent stream derived from a master seed and a label such as
    // "stage2:client3:shuffle".
    static Rng substream(std::uint64_t master, std::string_view label);

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    bool bernoulli(double p) { return uniform() < p; }
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[index(i)]);
    }
    std::vector<std::size_t> permutation(std::size_t n);

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t derive_seed(std::uint64_t master, std::string_view label);

}  // namespace beamgraph

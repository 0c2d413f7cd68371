// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "beamgraph/params.hpp"

namespace beamgraph::verify {

/// Outcome of one property suite. `worst` is the largest observed error in the
/// suite's own unit (absolute or relative, see `metric`).
struct SuiteResult {
    std::string name;
    bool pass = false;
    int trials = 0;
    int failures = 0;
    double worst = 0.0;
    double tolerance = 0.0;
    std::string metric;
    double seconds = 0.0;
    std::string detail;  // first failing case, if any
};

// Runs body(i) for i in [0, n) on up to `threads` workers. Each call must only
// touch its own slot of any shared output.
void parallel_for(int n, int threads, const std::function<void(int)>& body);

// Worker count from BEAMGRAPH_THREADS (default 1, capped by the hardware).
// Throws ContractViolation when the variable is set but not a positive integer.
int thread_budget();

// Total sum rate is unchanged when users' channels and strategy columns are
// permuted together. K in [2, 8].
SuiteResult prop1(std::uint64_t seed, int trials = 100, double tol = 1e-9, int threads = 1);

// Policy output follows a permutation of the vehicles: G(V P) = G(V) P.
// Uses `params` when given, otherwise fresh random parameters per trial.
SuiteResult prop2(std::uint64_t seed, int trials = 100, double tol = 1e-6, const tk::ParameterStore* params = nullptr,
                  int threads = 1);

// Diagonal Gaussians through linear maps: closed-form W2 against a direct
// evaluation (to 1e-12) and the Monte Carlo gradient gap against C * W2.
SuiteResult prop3(std::uint64_t seed, int trials = 100, int threads = 1);

// Central differences against reverse-mode gradients for every differentiable
// primitive, the fused rate op and the beam projection soft path.
SuiteResult gradients(std::uint64_t seed, int seeds = 20, double tol = 1e-4);

// rsu_forward outputs: at most one non-zero per column, non-negative, and
// total power in {0, P_max}.
SuiteResult constraints(std::uint64_t seed, int calls = 1000, double tol = 1e-9, int threads = 1);

// name in {prop1, prop2, prop3, grad, constraints, all}; trials <= 0 keeps each
// suite's default count.
std::vector<SuiteResult> run(const std::string& name, std::uint64_t seed, int trials = 0, int threads = 1);

std::string format(const SuiteResult& r);

}  // namespace beamgraph::verify

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "beamgraph/airsim.hpp"

namespace beamgraph::base {

struct PrecoderSolution {
    Eigen::MatrixXcd precoders;  // N_t x K, unit-norm columns
    std::vector<double> powers;  // K entries summing to at most P_max
    int iterations = 0;
    std::vector<double> objective_trace;  // total rate after initialisation and after each iteration

    // Precoders scaled by sqrt(power), ready for air::sum_rate_precoded.
    Eigen::MatrixXcd transmit() const;
};

// Weighted-MMSE sum-rate ascent (unit user weights) from a maximum-ratio start.
// The precoder step solves (A + mu I) v_k = w_k u_k h_k with mu >= 0 found by
// bisection on the power budget.
PrecoderSolution wmmse(const air::ChannelSet& h_est, double p_max, double sigma2, int max_iters = 100,
                       double tol = 1e-8);

// Greedy channel estimate from an RSS vector: sum over the L strongest beams of
// sqrt(r_w) c_w. Relative phases are unknown and taken as zero.
Eigen::VectorXcd rss_channel_estimate(const std::vector<double>& r, const air::Codebook& c, int l);

// Strongest beam per user (ties to the lowest index) with equal power split.
air::Strategy zf_sweep(const std::vector<std::vector<double>>& rss_all, int w, double p_max);

struct OracleResult {
    air::Strategy strategy;
    double total = 0.0;
};

// Exhaustive search over every beam assignment and every split of P_max into
// (grid - 1) equal units. Throws ContractViolation when W^K * grid^K > 1e7.
OracleResult exhaustive_oracle(const air::ChannelSet& h, const air::Codebook& c, double p_max, double sigma2,
                               int power_grid_size = 11);

}  // namespace beamgraph::base

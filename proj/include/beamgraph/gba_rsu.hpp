// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "beamgraph/airsim.hpp"
#include "beamgraph/autodiff.hpp"
#include "beamgraph/optim.hpp"

namespace beamgraph::rsu {

/// Interference graph over K vehicles. Node features are the rows of
/// `features` (vehicle k = row k). Directed edges (k, i) exist in both
/// directions for every undirected pair and are listed by ascending (k, i).
struct FeedbackGraph {
    int k = 0;
    int w = 0;
    Eigen::MatrixXi adjacency;  // K x K, symmetric, zero diagonal
    tk::DenseArray features;    // K x W
    std::vector<std::size_t> src, dst;
};

// A_ij = 1 iff columns i and j of V (W x K, binary) share a set bit and i != j.
FeedbackGraph build_graph(const air::FeedbackMatrix& v);
// Same rule applied to real-valued features thresholded at 0.5.
Eigen::MatrixXi adjacency_from_rows(const tk::DenseArray& rows);

struct RsuConfig {
    int w = 8;
    int d_g = 32;     // output width of the edge, self and cross encoders
    int hidden = 32;  // hidden width inside every two-layer MLP
};

struct ProjectionConfig {
    double tau = 1.0;
    double prune_fraction = 5e-4;
    double p_max = 1.0;
    bool non_negativity = true;
    bool re_normalization = true;

    void validate() const;
};

/// Parameter names: rsu/{edge,self,cross,proj}/{l0,l1}/{w,b}.
tk::ParameterStore init_rsu_params(const RsuConfig& cfg, Rng& rng);
RsuConfig infer_rsu_config(const tk::ParameterStore& params);

// Layer-level pieces, all operating on vehicle-major rows (K x W).
tk::Var rsu_logits(tk::Binder& bind, tk::Var node_rows, const Eigen::MatrixXi& adjacency);
tk::Var beam_project(tk::Var z, const ProjectionConfig& cfg);
// Full policy on the tape; returns the strategy as K x W rows.
tk::Var rsu_policy(tk::Binder& bind, tk::Var node_rows, const Eigen::MatrixXi& adjacency, const ProjectionConfig& cfg);

// Negative sum rate of a K x W strategy against the beam-domain channel
// G = H^H C (K x W). Fused op with an exact gradient.
tk::Var rate_loss(tk::Var t_rows, const Eigen::MatrixXcd& g, double sigma2);
// Per-user rates of a K x W strategy (sum of the entries is -rate_loss).
tk::Var user_rates(tk::Var t_rows, const Eigen::MatrixXcd& g, double sigma2);

// Value-only forward: W x K strategy for a feedback matrix.
air::Strategy rsu_forward(const FeedbackGraph& graph, tk::ParameterStore& params, const ProjectionConfig& cfg);
air::Strategy rsu_forward(const air::FeedbackMatrix& v, tk::ParameterStore& params, const ProjectionConfig& cfg);

// Strategies whose total power exceeds P_max are scaled down onto the budget
// before rates are measured (used to score the ablations without re-normalization).
air::Strategy scale_to_budget(const air::Strategy& t, double p_max);

struct Snapshot {
    air::FeedbackMatrix v;  // W x K
    Eigen::MatrixXcd g;     // K x W beam-domain channel
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 16;  // snapshots per optimizer step
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double p_drop = 0.25;
    double p_error = 0.0;
    double sigma2 = 1e-3;
    ProjectionConfig projection;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;      // mean over snapshots of -sum rate on the perturbed input
    double sum_rate = 0.0;  // mean sum rate on the clean input with the epoch-end parameters
};

struct TrainResult {
    tk::ParameterStore params;
    std::vector<EpochStats> trace;
};

// Perturbation applied to a feedback matrix before each forward pass: each bit
// is flipped with probability p_error (XOR mask), then each column is dropped
// with probability p_drop. Dropped vehicles leave the snapshot entirely.
Snapshot perturb(const Snapshot& s, double p_drop, double p_error, Rng& rng);

// Stage 1: ground-truth feedback with random vehicle dropping.
TrainResult train_stage1(const std::vector<Snapshot>& data, const RsuConfig& model, const TrainConfig& cfg,
                         std::uint64_t seed);
// Stage 3: continues from `params` on predicted and ground-truth feedback with
// bit errors and dropping.
TrainResult retrain_stage3(const std::vector<Snapshot>& predicted, const std::vector<Snapshot>& ground_truth,
                           tk::ParameterStore params, const TrainConfig& cfg, std::uint64_t seed);

// Mean total rate of the policy over snapshots, with over-budget strategies
// scaled onto the budget.
double mean_sum_rate(const std::vector<Snapshot>& data, tk::ParameterStore& params, const ProjectionConfig& cfg,
                     double sigma2);

std::vector<Snapshot> snapshots_from(const air::Dataset& d);

}  // namespace beamgraph::rsu

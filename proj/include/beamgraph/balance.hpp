// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "beamgraph/fedsim.hpp"

namespace beamgraph::bal {

using air::kModalities;
using air::ModalitySet;

// ---------------------------------------------------------------------------
// Imbalance measures

/// Counts per observed feedback vector, keyed by its bit string ("0110...").
struct LabelDistribution {
    std::map<std::string, double> counts;
    double total = 0.0;

    void add(const std::vector<int>& label, double n = 1.0);
    double count(const std::string& key) const;
};

std::string combo_key(const std::vector<int>& label);
std::vector<int> combo_bits(const std::string& key);
LabelDistribution label_distribution(const std::vector<air::ModalitySample>& samples);

struct Completeness {
    std::vector<std::array<double, kModalities>> per_vehicle;
    std::array<double, kModalities> global{};
};
// kappa_k^q = N_k^q / max_q' N_k^q'; the global value is the mean over vehicles.
Completeness completeness(const std::vector<std::array<std::size_t, kModalities>>& counts);
// Counts present samples per modality, restricted to each client's set.
Completeness completeness(const std::vector<fed::Client>& clients);

inline constexpr double kPhiEps = 1e-6;
inline constexpr double kPhiCap = 1e3;

// phi_i = mean over j != i of R_i / max(R_j, eps), capped at `cap`.
std::vector<double> contribution(const std::vector<double>& rates, double eps = kPhiEps, double cap = kPhiCap);

// Mean over vehicle pairs of sum_m min(p_i(m), p_j(m)) with p the normalized counts.
double overlap(const std::vector<LabelDistribution>& dists);

// alpha * sum_k sum_q |1 - phi_k^q| + beta * (-sum_k sum_q R_k^q) / K.
double harmonious_loss(const std::vector<std::vector<double>>& phi, const std::vector<std::vector<double>>& rates,
                       double alpha, double beta);

// One vehicle's share of the harmonious loss, with alpha * sum_q |1 - phi^q|
// computed from `rates` through `contribution`, and its gradient with respect
// to `rates`. `vehicles` is the K dividing the rate term.
struct HarmoniousTerm {
    double loss = 0.0;
    std::vector<double> phi;
    std::vector<double> grad;
};
HarmoniousTerm harmonious_term(const std::vector<double>& rates, double alpha, double beta, int vehicles,
                               double eps = kPhiEps, double cap = kPhiCap);

// ---------------------------------------------------------------------------
// Harmonious branch (modality dropping)

struct HarmoniousConfig {
    int l_h = 16;
    double lr = 1e-3;
    // Initial mask-logit bias; positive values start by keeping every modality.
    double keep_bias = 2.0;
};

/// MLP |Q| -> L_H, single-head self-attention over the L_H entries with a
/// residual connection, then a linear head to one logit per modality.
/// Names: har/in/{w,b}, har/attn/{q,k}, har/out/{w,b}.
tk::ParameterStore init_harmonious_params(int modalities, const HarmoniousConfig& cfg, Rng& rng);

tk::Var harmonious_logits(tk::Binder& bind, tk::Var phi_prev);
// Block keep/drop decisions: sigmoid > 0.5 forward, sigmoid gradient backward.
// When every modality would be dropped the highest logit is kept.
tk::Var harmonious_masks(tk::Var logits);

// ---------------------------------------------------------------------------
// DA-: harmonious modality dropping during federated training

struct DaMinusConfig {
    double alpha = 1.0;
    double beta = 1.0;
    HarmoniousConfig har;
    rsu::ProjectionConfig projection;
    double sigma2 = 1e-3;
};

struct PhiRecord {
    int round = 0;
    int epoch = 0;  // local epoch within the round, from 1
    int client = 0;
    std::vector<double> phi;  // mean over the epoch's mini-batches, one per owned modality
    std::vector<double> mask_keep_rate;
    int min_kept = 0;  // fewest modalities kept in any mini-batch of the epoch
};

/// Client side of the harmonious branch plus the RSU-side contribution
/// computation. Uni-modal predictions of each mini-batch are placed into the
/// snapshot of their timestep (other vehicles report their true feedback), the
/// RSU policy is run per modality and the rates go into phi and the harmonious
/// loss, whose gradient is sent back to the vehicle.
class DaMinus {
  public:
    DaMinus(const air::Dataset& d, const tk::ParameterStore& rsu_params, const std::vector<fed::Client>& clients,
            const veh::VehicleConfig& vcfg, const fed::FlConfig& fl, const DaMinusConfig& cfg, std::uint64_t seed);

    fed::HookFactory factory();
    const std::vector<PhiRecord>& log() const { return log_; }
    // Harmonious branch parameters of client `index` (kept local, never aggregated).
    const tk::ParameterStore& harmonious(std::size_t index) const { return state_.at(index).har; }
    // Mean |1 - phi| over clients with at least two modalities, per global epoch index (from 1).
    std::vector<double> mean_deviation_by_epoch() const;

  private:
    struct ClientState {
        tk::ParameterStore har;
        tk::AdamW opt;
        std::vector<double> phi_prev;
        std::vector<int> members;
        int batch_in_epoch = 0;
        int epoch = 0;
        std::vector<double> phi_sum;
        std::vector<double> keep_sum;
        int min_kept = 0;
        int batches = 0;
    };

    std::vector<double> masks_for(ClientState& st);
    void after_step(std::size_t client, int round, const veh::Batch& batch, tk::ParameterStore& params,
                    fed::CommCounter& comm);

    const air::Dataset& d_;
    tk::ParameterStore rsu_;
    const std::vector<fed::Client>& clients_;
    veh::VehicleConfig vcfg_;
    fed::FlConfig fl_;
    DaMinusConfig cfg_;
    std::vector<ClientState> state_;
    std::vector<std::vector<const air::ModalitySample*>> batch_samples_;
    std::vector<PhiRecord> log_;
};

// ---------------------------------------------------------------------------
// DA+: synthetic samples for under-represented feedback combinations

struct TargetCombo {
    std::string key;
    double delta = 0.0;  // max count - count of this combination
    double score = 0.0;  // RSU sum rate used for ranking
    int count = 0;       // synthetic samples added by augment_clients
};

// Candidates are the combinations in `n` or `support` with a positive
// deficit; the `limit` best by `rank` are kept (ties: larger deficit, then key).
std::vector<TargetCombo> select_target_combos(const LabelDistribution& n,
                                              const std::function<double(const std::string&)>& rank,
                                              const std::vector<std::string>& support = {}, std::size_t limit = 3);

// Ranking used by the pipeline: mean RSU sum rate over the given timesteps when
// vehicle k reports the combination instead of its true feedback.
double combo_sum_rate(const air::Dataset& d, int vehicle, const std::vector<int>& timesteps, const std::string& key,
                      tk::ParameterStore& rsu_params, const rsu::ProjectionConfig& proj, double sigma2);

struct GenerateConfig {
    int count = 32;
    int batch_size = 32;
    int steps = 200;
    double lr = 0.05;
};

struct SynthBatch {
    std::vector<air::ModalitySample> samples;
    std::vector<int> target;
    std::vector<double> loss_trace;  // mean generation loss per step over the batches
    double initial_mean_gap = 0.0;   // ||mu_hat - mu_run|| over all batch-norm stages, first batch
    double final_mean_gap = 0.0;
};

struct GenerationLoss {
    double bn = 0.0;
    double bce = 0.0;
    double mean_gap = 0.0;
    double total() const { return bn + bce; }
};

// Batch-statistic matching loss plus BCE toward `target` for given inputs
// (rows per modality); the model is evaluated with frozen parameters.
GenerationLoss generation_loss(const tk::ParameterStore& params, const veh::VehicleConfig& vcfg, ModalitySet set,
                               const std::array<tk::DenseArray, kModalities>& inputs, const std::vector<int>& target);

// Gaussian-initialized inputs optimized on the generation loss. The model is
// only read.
SynthBatch generate(const tk::ParameterStore& params, const veh::VehicleConfig& vcfg, ModalitySet set,
                    const std::vector<int>& target, const GenerateConfig& cfg, std::uint64_t seed);

struct DaPlusConfig {
    GenerateConfig gen;
    std::size_t combos = 3;
    int max_per_combo = 64;
    fed::FlConfig finetune;
};

struct DaPlusReport {
    double zeta_before = 0.0;
    double zeta_after = 0.0;
    std::vector<std::vector<TargetCombo>> targets;  // per client
    std::size_t synthetic_samples = 0;
};

// Adds synthetic samples to each client's training set (the returned copies)
// for the selected combinations. A combination's count starts at
// min(delta, max_per_combo) and is halved until adding it does not lower the
// label overlap across clients, so the mixed overlap never falls below the
// original one.
std::vector<fed::Client> augment_clients(const std::vector<fed::Client>& clients, const air::Dataset& d,
                                         const tk::ParameterStore& global, const veh::VehicleConfig& vcfg,
                                         tk::ParameterStore& rsu_params, const rsu::ProjectionConfig& proj,
                                         double sigma2, const DaPlusConfig& cfg, std::uint64_t seed,
                                         DaPlusReport* report);

// Federated fine-tuning on the mixed datasets where only decision layers move
// and batch-norm statistics stay fixed.
fed::FlResult da_plus_finetune(const std::vector<fed::Client>& mixed, const tk::ParameterStore& global,
                               const veh::VehicleConfig& vcfg, const fed::FlConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Gradient gap between synthetic and real feature distributions

struct BoundCheck {
    double w2 = 0.0;
    double grad_gap = 0.0;
    double lipschitz = 0.0;
    double stderr_ = 0.0;
    bool bound_ok = false;
};

// Diagonal Gaussians N(mu, sigma^2) and N(mu_hat, sigma_hat^2) pushed through
// psi(a) = L a; the gap of the expectations is estimated by Monte Carlo.
BoundCheck gradient_bound_check(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma, const Eigen::VectorXd& mu_hat,
                                const Eigen::VectorXd& sigma_hat, const Eigen::MatrixXd& lipschitz_map,
                                int n_samples, std::uint64_t seed);
double w2_diagonal(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma, const Eigen::VectorXd& mu_hat,
                   const Eigen::VectorXd& sigma_hat);

// ---------------------------------------------------------------------------

struct ImbalanceReport {
    Completeness kappa;
    double zeta = 0.0;
};
ImbalanceReport imbalance_report(const std::vector<fed::Client>& clients);
std::string imbalance_report_text(const ImbalanceReport& r);
void write_phi_csv(const std::filesystem::path& path, const std::vector<PhiRecord>& log);

}  // namespace beamgraph::bal

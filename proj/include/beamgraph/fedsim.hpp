// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "beamgraph/gba_rsu.hpp"
#include "beamgraph/gba_vehicle.hpp"

namespace beamgraph::fed {

using air::ModalitySet;

struct Client {
    int id = 0;
    ModalitySet set;
    std::vector<air::ModalitySample> train;
    std::vector<air::ModalitySample> test;

    std::vector<const air::ModalitySample*> train_ptrs() const;
    std::vector<const air::ModalitySample*> test_ptrs() const;
};

/// Timesteps shared by every vehicle, split once so the test snapshots line up
/// across clients.
struct Split {
    std::vector<int> train_t;
    std::vector<int> test_t;
};
Split split_timesteps(int timesteps, double train_fraction, std::uint64_t seed);

// One client per vehicle with the vehicle's modality set.
std::vector<Client> make_clients(const air::Dataset& d, const Split& split);

struct Upload {
    ModalitySet set;
    const tk::ParameterStore* params = nullptr;
    std::size_t samples = 0;
};

// Modality-aware mean: every entry is averaged over the uploads that own it,
// in upload order; entries nobody owns keep their value from `previous`.
// With `size_weighted` the mean is weighted by sample counts.
tk::ParameterStore aggregate(const std::vector<Upload>& uploads, const tk::ParameterStore& previous,
                             bool size_weighted = false);

struct RoundRecord {
    int round = 0;
    int client = 0;
    double local_loss = 0.0;
    double test_exact = 0.0;
    double test_f1 = 0.0;
    std::size_t bytes_up = 0;
    std::size_t bytes_down = 0;
};

struct CommCounter {
    std::size_t up = 0;
    std::size_t down = 0;
};

struct FlConfig {
    int rounds = 20;
    int local_epochs = 5;
    veh::LocalTrainConfig local;
    bool size_weighted = false;
    tk::AdamW::Filter update_filter;  // further restricts which owned entries are updated
};

// Supplies the per-mini-batch hook a client runs during a round (DA-); message
// payloads are charged to `comm`.
using HookFactory = std::function<std::optional<veh::MinibatchHook>(std::size_t client_index, int round,
                                                                   CommCounter& comm)>;

struct FlResult {
    tk::ParameterStore global;
    std::vector<RoundRecord> history;
    std::size_t bytes_up = 0;
    std::size_t bytes_down = 0;
};

// Parameter payload in bytes (8 per stored value).
std::size_t payload_bytes(const tk::ParameterStore& p);

// Rounds of broadcast, local training, upload and aggregation. Each client keeps
// its optimizer state across rounds and shuffles with the substream
// "fl:client<id>:shuffle".
FlResult run_fl(const std::vector<Client>& clients, const tk::ParameterStore& initial, const veh::VehicleConfig& vcfg,
                const FlConfig& cfg, std::uint64_t seed, const HookFactory& hooks = {});

struct UbResult {
    tk::ParameterStore params;
    std::size_t pooled_samples = 0;
    std::size_t raw_bytes = 0;  // raw feature and label payload moved to the server
    std::vector<double> epoch_loss;
};

// Centralized training on the pooled client data.
UbResult run_ub(const std::vector<Client>& clients, const tk::ParameterStore& initial, const veh::VehicleConfig& vcfg,
                int epochs, const veh::LocalTrainConfig& local, std::uint64_t seed);

// Mean accuracy of `params` pruned to each client's set, over all clients' test samples.
veh::Accuracy test_accuracy(const std::vector<Client>& clients, const tk::ParameterStore& params,
                            const veh::VehicleConfig& vcfg);

struct EvalConfig {
    rsu::ProjectionConfig projection;
    double sigma2 = 1e-3;
    double t_delay = 0.91e-3;
    double t_coher = 62.4e-3;
    bool ground_truth = false;  // feed true feedback instead of predictions
};

struct EvalMetrics {
    double sum_rate = 0.0;
    double effective_rate = 0.0;
    double exact = 0.0;
    double f1 = 0.0;
    int snapshots = 0;
};

// End-to-end pass over the test timesteps: each vehicle predicts its feedback
// from the modalities it holds and has live, the RSU policy aligns beams, and
// rates are measured on the true channels.
EvalMetrics evaluate(const air::Dataset& d, const std::vector<ModalitySet>& sets, const std::vector<int>& test_t,
                     const tk::ParameterStore& vehicle_params, const veh::VehicleConfig& vcfg,
                     tk::ParameterStore& rsu_params, const EvalConfig& cfg);

void write_rounds_csv(const std::filesystem::path& path, const std::vector<RoundRecord>& history);

}  // namespace beamgraph::fed

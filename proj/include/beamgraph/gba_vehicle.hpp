// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "beamgraph/airsim.hpp"
#include "beamgraph/autodiff.hpp"
#include "beamgraph/optim.hpp"

namespace beamgraph::veh {

using air::kModalities;
using air::ModalitySet;

struct VehicleConfig {
    int w = 8;
    std::array<int, kModalities> input{2, 8, 16};    // feature length per modality (G, R, L)
    std::array<int, kModalities> latent{16, 16, 32};  // encoder output length L_q
    int enc_hidden = 32;
    int fuse_hidden = 32;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    void validate() const;
};

// Input lengths and W taken from a scenario; model widths keep their defaults.
VehicleConfig vehicle_config_for(const air::ScenarioConfig& s);

// "enc_G/", "fuse/L/" and so on.
std::string encoder_prefix(int q);
std::string fusion_block_prefix(int q);
// Names updated by decision-layer fine-tuning: the last encoder layers and the fusion branch.
bool is_decision_layer(std::string_view name);
// Names a client holding `set` trains: its encoders, its fusion blocks and the fusion output.
bool owned_by(std::string_view name, ModalitySet set);

/// Encoder per modality: affine -> batch norm -> ReLU -> affine (enc_<q>/l0,
/// enc_<q>/bn, enc_<q>/l1). Fusion: one affine block per modality
/// (fuse/<q>/w, fuse/<q>/b) whose outputs are summed, then ReLU, the output
/// affine fuse/out and a sigmoid. The bias blocks together form the bias of
/// the first fusion layer.
tk::ParameterStore init_vehicle_params(const VehicleConfig& cfg, ModalitySet set, Rng& rng);

/// Samples stacked per modality. rows[q] lists the batch positions whose
/// modality q is present and used; x[q] holds those samples' features.
struct Batch {
    std::size_t size = 0;
    std::array<tk::DenseArray, kModalities> x;
    std::array<std::vector<std::size_t>, kModalities> rows;
    tk::DenseArray labels;  // size x W
    std::vector<const air::ModalitySample*> samples;
};

Batch make_batch(const std::vector<const air::ModalitySample*>& samples, ModalitySet set, const VehicleConfig& cfg);

struct EncoderTrace {
    tk::Var pre_norm;  // input of the batch-norm stage
    tk::Var out;       // f_q
};

EncoderTrace encode(tk::Binder& bind, const VehicleConfig& cfg, int q, tk::Var x, tk::BnMode mode);

struct Forward {
    std::array<EncoderTrace, kModalities> enc;  // unset for modalities outside the set or absent from the batch
    tk::Var fused;  // sum of the per-modality fusion blocks, before the ReLU
    tk::Var logits;
    tk::Var probs;
};

// Per-modality block masks (1 keeps the block, 0 removes it) applied to f_q
// before fusion.
using BlockMask = std::array<double, kModalities>;
inline constexpr BlockMask kKeepAll{1.0, 1.0, 1.0};

// Batch prediction through the modalities in `set`. In train mode a modality
// seen by a single sample is normalized with its running statistics.
Forward forward(tk::Binder& bind, const VehicleConfig& cfg, const Batch& batch, ModalitySet set, tk::BnMode mode,
                const BlockMask& mask = kKeepAll);
// Same pipeline with caller-supplied feature variables (rows aligned with
// batch.rows). A valid entry of `mask_vars` (shape [1]) replaces the numeric
// mask of its modality so gradients reach whatever produced it.
Forward forward_inputs(tk::Binder& bind, const VehicleConfig& cfg, const Batch& batch,
                       const std::array<tk::Var, kModalities>& inputs, ModalitySet set, tk::BnMode mode,
                       const BlockMask& mask = kKeepAll, const std::array<tk::Var, kModalities>* mask_vars = nullptr);

// Eval-mode probabilities, one row per sample.
tk::DenseArray predict(tk::ParameterStore& params, const VehicleConfig& cfg,
                       const std::vector<const air::ModalitySample*>& samples, ModalitySet set);

struct Accuracy {
    double exact = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};
// Per-sample metrics; with no positives predicted or present the sample scores 1.
Accuracy accuracy(std::span<const double> prob, std::span<const int> label, double threshold = 0.5);
// Means of the per-sample metrics over a batch of predictions.
Accuracy mean_accuracy(const tk::DenseArray& prob, const std::vector<const air::ModalitySample*>& samples,
                       double threshold = 0.5);

/// Subset of a vehicle model holding only the branches of `set`.
struct PrunedModel {
    ModalitySet set;
    VehicleConfig cfg;
    tk::ParameterStore params;
    std::size_t full_scalars = 0;
    std::size_t pruned_scalars = 0;
};
PrunedModel prune_for(ModalitySet set, const tk::ParameterStore& params, const VehicleConfig& cfg);
tk::DenseArray predict(PrunedModel& model, const std::vector<const air::ModalitySample*>& samples);

struct LocalTrainConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    int batch_size = 32;
    // eval keeps the batch-norm running statistics fixed (decision-layer fine-tuning)
    tk::BnMode bn_mode = tk::BnMode::train;
};

struct LocalStats {
    double loss = 0.0;  // mean BCE over mini-batches
    int batches = 0;
};

/// Optional per-mini-batch hook: `mask` supplies block masks for the BCE
/// forward pass, `after_step` runs once the branch update has been applied.
struct MinibatchHook {
    std::function<BlockMask(const Batch&)> mask;
    std::function<void(const Batch&, tk::ParameterStore&)> after_step;
};

// One pass over `samples` in shuffled mini-batches; each mini-batch takes one
// AdamW step on the parameters owned by `set`.
LocalStats local_epoch(tk::ParameterStore& params, const VehicleConfig& cfg,
                       const std::vector<const air::ModalitySample*>& samples, ModalitySet set,
                       const LocalTrainConfig& tc, tk::AdamW& opt, Rng& shuffle, const MinibatchHook* hook = nullptr,
                       const tk::AdamW::Filter& extra_filter = {});

// Mean BCE of eval-mode predictions.
double mean_bce(tk::ParameterStore& params, const VehicleConfig& cfg,
                const std::vector<const air::ModalitySample*>& samples, ModalitySet set);

}  // namespace beamgraph::veh

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "beamgraph/balance.hpp"
#include "beamgraph/baselines.hpp"

namespace beamgraph::cli {

// ---------------------------------------------------------------------------
// Run configuration

struct ModelSettings {
    int d_g = 32;
    int rsu_hidden = 32;
    std::array<int, air::kModalities> latent{16, 16, 32};
    int enc_hidden = 32;
    int fuse_hidden = 32;
};

struct Stage1Settings {
    int epochs = 50;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 1e-4;
};

struct Stage2Settings {
    int rounds = 20;
    int local_epochs = 5;
    int batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double train_fraction = 0.8;
    bool size_weighted = false;
};

struct Stage3Settings {
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 1e-4;
};

struct PerturbationSettings {
    double p_drop = 0.25;
    double p_error = 0.2;
    bool random_dropping = true;
};

struct DaSettings {
    bool da_minus = false;
    bool da_plus = false;
    double alpha = 1.0;
    double beta = 1.0;
    int l_h = 16;
    double har_lr = 1e-4;
    double keep_bias = 2.0;
    int gen_count = 32;
    int gen_batch_size = 32;
    int gen_steps = 200;
    double gen_lr = 0.05;
    int combos = 3;
    int max_per_combo = 64;
    int finetune_rounds = 5;
};

struct BaselineSettings {
    bool wmmse = true;
    bool zf_sweep = true;
    bool oracle = false;
    int rss_paths = 2;  // strongest beams combined by the RSS channel estimate
    int wmmse_iters = 100;
};

/// Fully resolved experiment description. Every key has a default except the
/// scenario block; unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    air::ScenarioConfig scenario;
    ModelSettings model;
    Stage1Settings stage1;
    Stage2Settings stage2;
    Stage3Settings stage3;
    PerturbationSettings perturbation;
    rsu::ProjectionConfig projection;  // p_max comes from the scenario
    DaSettings da;
    BaselineSettings baselines;
    air::OverheadConfig overhead;

    void validate() const;
    // Strict nested parse; throws ContractViolation naming the offending key.
    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Derived model and training settings.
rsu::RsuConfig rsu_config(const RunConfig& c);
veh::VehicleConfig vehicle_config(const RunConfig& c);
rsu::ProjectionConfig projection(const RunConfig& c);
fed::FlConfig fl_config(const RunConfig& c);
bal::DaMinusConfig da_minus_config(const RunConfig& c);
bal::DaPlusConfig da_plus_config(const RunConfig& c);

// Effective-rate timing: delays per scheme from the overhead table and the
// coherence time of the scenario (contact time over W).
struct Timing {
    double t_coher = 0.0;
    double t_delay_gba = 0.0;
    double t_delay_wmmse = 0.0;
    double t_delay_sweep = 0.0;
};
Timing timing_for(const RunConfig& c);

// Stage failures are reported with the stage name in front of the message.
class StageError : public std::runtime_error {
  public:
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(stage) {}
    const std::string& stage() const noexcept { return stage_; }

  private:
    std::string stage_;
};

// ---------------------------------------------------------------------------
// Pipeline

struct Metric {
    std::string stage;
    std::string name;
    double value = 0.0;
};

struct LossRow {
    std::string stage;
    int epoch = 0;
    double loss = 0.0;
    double sum_rate = 0.0;
};

struct BaselineRow {
    std::string scheme;
    double sum_rate = 0.0;
    double effective_rate = 0.0;
    int snapshots = 0;
};

/// In-memory state shared by the stages. Stage runners fill the fields they
/// produce; the CLI persists them between invocations.
struct Workspace {
    RunConfig cfg;
    air::Dataset data;
    fed::Split split;
    std::vector<fed::Client> clients;
    std::optional<tk::ParameterStore> rsu_stage1;
    std::optional<tk::ParameterStore> rsu_stage3;
    std::optional<tk::ParameterStore> vehicle_stage2;
    std::optional<tk::ParameterStore> vehicle_final;
    std::vector<tk::ParameterStore> harmonious;  // per client, DA- only
    bool stage2_used_da_minus = false;
    std::vector<Metric> metrics;
    std::vector<LossRow> loss_trace;
    std::vector<fed::RoundRecord> rounds;
    std::vector<bal::PhiRecord> phi;
    std::vector<BaselineRow> baselines;
};

// Scenario, split and clients; every random draw derives from cfg.seed.
Workspace prepare(const RunConfig& cfg);

void run_stage1(Workspace& ws);
void run_stage2(Workspace& ws);                           // FL, with DA- when enabled
void run_da_plus(Workspace& ws, bool allow_unordered);    // requires stage 2
void run_stage3(Workspace& ws);                           // retraining on predicted and true feedback
void run_eval(Workspace& ws);
void run_baselines(Workspace& ws);
// Stage 1 -> Stage 2 (+DA-) -> DA+ -> Stage 3 -> evaluation and baselines.
void run_pipeline(Workspace& ws, bool allow_unordered);

// Rejects DA+ without DA- unless allow_unordered is set.
void check_ordering(const RunConfig& cfg, bool allow_unordered);

// ---------------------------------------------------------------------------
// Persistence

inline constexpr const char* kVersion = "0.1.0";
std::string version_string();

// Writes the config echo, CSVs, checkpoints and summary.json into dir.
void write_outputs(const Workspace& ws, const std::filesystem::path& dir, const std::string& command,
                   double wall_seconds);
// Restores checkpoints written by earlier commands (missing files are skipped).
void load_checkpoints(Workspace& ws, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Command line

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kVerification = 3 };

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace beamgraph::cli

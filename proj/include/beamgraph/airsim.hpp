// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "beamgraph/rng.hpp"

namespace beamgraph::air {

using cd = std::complex<double>;
using Codebook = Eigen::MatrixXcd;     // N_t x W, unit-norm columns
using ChannelSet = Eigen::MatrixXcd;   // N_t x K, column k = h_k
using Strategy = Eigen::MatrixXd;      // W x K, at most one nonzero per column
using FeedbackMatrix = Eigen::MatrixXi;  // W x K, entries in {0, 1}

enum Modality : int { kGps = 0, kRgb = 1, kLidar = 2 };
inline constexpr int kModalities = 3;
inline constexpr std::array<char, kModalities> kModalityLetters = {'G', 'R', 'L'};

/// Subset of {G, R, L} stored as a bit mask (bit q set when modality q is present).
struct ModalitySet {
    std::uint8_t bits = 0;

    static ModalitySet all() { return {0b111}; }
    static ModalitySet only(int q) { return {static_cast<std::uint8_t>(1u << q)}; }
    // Parses letters such as "GL"; throws ContractViolation on anything else.
    static ModalitySet parse(const std::string& letters);

    bool has(int q) const { return (bits >> q) & 1u; }
    void set(int q) { bits |= static_cast<std::uint8_t>(1u << q); }
    bool empty() const { return bits == 0; }
    int count() const { return __builtin_popcount(bits); }
    std::vector<int> members() const;
    std::string str() const;
    friend bool operator==(ModalitySet, ModalitySet) = default;
};

struct Vec2 {
    double x = 0.0, y = 0.0;
};

// Axis-aligned rectangle on the road plane; moves along x at `vx` m/s and
// wraps around inside the road span.
struct Obstacle {
    double x0, y0, x1, y1;
    double vx = 0.0;
};

struct VehicleState {
    Vec2 position;
    double velocity = 0.0;
    ModalitySet modalities;
    std::array<double, kModalities> availability{1.0, 1.0, 1.0};
};

struct ScenarioConfig {
    // required keys
    int n_t = 4;
    int w = 8;
    double sigma2 = 1e-3;
    double p_max = 1.0;
    double rsu_height = 10.0;
    double coverage_deg = 120.0;
    int n_vehicles = 2;
    int n_obstacles = 2;
    double gamma = 0.1;
    std::uint64_t seed = 1;
    int d_r = 8;
    int d_l = 16;
    int paths = 2;
    std::vector<ModalitySet> modality_sets{ModalitySet::all()};  // cycled over vehicles
    std::array<double, kModalities> availability_rates{1.0, 1.0, 1.0};
    // optional keys
    int timesteps = 50;
    double speed = 10.0;
    double dt = 0.1;
    double road_offset = 15.0;  // perpendicular distance from the RSU foot to the first lane
    int lanes = 2;
    double lane_width = 3.5;
    double gps_noise = 0.5;
    double clutter = 0.05;
    double lidar_noise = 0.02;
    double obstacle_speed = 0.0;
    std::string trajectory = "shared";  // "shared" or "segmented"

    void validate() const;
    // Strict parse: unknown keys and missing required keys throw ContractViolation
    // naming the key.
    static ScenarioConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

struct Scenario {
    ScenarioConfig cfg;
    double road_half_length = 0.0;
    std::vector<VehicleState> vehicles;  // state at t = 0
    std::vector<Obstacle> obstacles;     // state at t = 0
    std::vector<Vec2> scatterers;
    std::vector<double> scatterer_phase;
};

struct ModalitySample {
    int vehicle = 0;
    int t = 0;
    bool synthetic = false;
    std::array<bool, kModalities> available{true, true, true};
    std::vector<double> gps, rgb, lidar;
    std::vector<int> label;   // W bits
    std::vector<double> rss;  // W values (empty for synthetic samples)
    Eigen::VectorXcd channel;  // N_t (empty for synthetic samples)
    Vec2 position;
    bool los_blocked = false;

    const std::vector<double>& feature(int q) const;
    std::vector<double>& feature(int q);
};

/// Output of make_scenario. streams[k][t] is vehicle k at timestep t, so the
/// K samples sharing a t form one RSU snapshot.
struct Dataset {
    Scenario scenario;
    Codebook codebook;
    std::vector<std::vector<ModalitySample>> streams;

    int vehicles() const { return static_cast<int>(streams.size()); }
    int timesteps() const { return streams.empty() ? 0 : static_cast<int>(streams.front().size()); }
    ChannelSet channels_at(int t) const;
    FeedbackMatrix feedback_at(int t) const;
};

// Uniform grid in direction cosine u over [-sin(sector/2), sin(sector/2)],
// c_w[n] = exp(j pi n u_w) / sqrt(N_t). With W = N_t and sector = pi the
// columns form a DFT basis.
Codebook make_codebook(int n_t, int w, double sector_rad = 3.14159265358979323846);
Eigen::VectorXcd array_response(int n_t, double u);

Dataset make_scenario(const ScenarioConfig& cfg, std::uint64_t seed);
Dataset make_scenario(const ScenarioConfig& cfg);

// Geometry helpers exposed for tests.
bool segment_hits_rectangle(Vec2 a, Vec2 b, const Obstacle& o);
double los_direction_cosine(const Scenario& s, Vec2 p);
Eigen::VectorXcd channel_at(const Scenario& s, Vec2 p, const std::vector<Obstacle>& obstacles, bool* blocked = nullptr);
std::vector<Obstacle> obstacles_at(const Scenario& s, double time);

std::vector<double> rss(const Eigen::VectorXcd& h, const Codebook& c);
std::vector<int> quantize(const std::vector<double>& r, double gamma);

struct RateResult {
    std::vector<double> per_user;
    double total = 0.0;
};
// Beam-domain channel G = H^H C (K x W).
Eigen::MatrixXcd beam_domain(const ChannelSet& h, const Codebook& c);
RateResult sum_rate(const Eigen::MatrixXcd& g, const Strategy& t, double sigma2);
RateResult sum_rate(const ChannelSet& h, const Codebook& c, const Strategy& t, double sigma2);
// Rates for arbitrary precoders F (N_t x K, power folded into the columns).
RateResult sum_rate_precoded(const ChannelSet& h, const Eigen::MatrixXcd& f, double sigma2);

double contact_time(double height, double coverage_rad, double velocity);
double coherence_time(double contact, int w);
double effective_sum_rate(double rate, double t_delay, double t_coher);

enum class FeedbackScheme { full_rss, sweep_index, gba };
int feedback_bits(FeedbackScheme scheme, int w, int rss_bits = 442);

struct OverheadConfig {
    double t_coher_s = 62.4e-3;
    double t_init_ce_s = 20.31e-3;     // beam initialisation with channel estimation
    double t_init_sweep_s = 20.31e-3;  // beam sweeping uses the same initialisation
    double t_init_gba_s = 0.91e-3;     // feedback prediction
    double backhaul_bps = 1.79e9;
    int rss_bits = 442;
    int w = 34;
};

struct OverheadRow {
    std::string scheme;
    int bits = 0;
    double feedback_latency_s = 0.0;
    double delay_s = 0.0;
    double period_fraction = 0.0;
};
std::vector<OverheadRow> overhead_table(const OverheadConfig& cfg);

// One CSV record per (vehicle, timestep); the first line is a schema comment.
void export_dataset_csv(const std::filesystem::path& path, const Dataset& d,
                        const std::vector<ModalitySample>& extra = {});

}  // namespace beamgraph::air

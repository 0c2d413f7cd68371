// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/airsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "beamgraph/dense_array.hpp"
#include "json.hpp"

namespace beamgraph::air {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kWavelength = 5e-3;         // 60 GHz carrier
constexpr double kReflectionAmplitude = 0.501;  // 6 dB power loss per bounce

double wrap_into(double x, double lo, double hi) {
    const double span = hi - lo;
    double r = std::fmod(x - lo, span);
    if (r < 0)
        r += span;
    return lo + r;
}

double dist2(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Distance along the ray origin + s * dir (|dir| = 1) to the rectangle, or -1.
double ray_rectangle(Vec2 origin, Vec2 dir, const Obstacle& o) {
    double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
    const double lo[2] = {std::min(o.x0, o.x1), std::min(o.y0, o.y1)};
    const double hi[2] = {std::max(o.x0, o.x1), std::max(o.y0, o.y1)};
    const double p[2] = {origin.x, origin.y};
    const double d[2] = {dir.x, dir.y};
    for (int a = 0; a < 2; ++a) {
        if (std::abs(d[a]) < 1e-15) {
            if (p[a] < lo[a] || p[a] > hi[a])
                return -1.0;
            continue;
        }
        double t1 = (lo[a] - p[a]) / d[a];
        double t2 = (hi[a] - p[a]) / d[a];
        if (t1 > t2)
            std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
        if (tmin > tmax)
            return -1.0;
    }
    return tmin;
}

std::vector<double> lane_ys(const ScenarioConfig& c) {
    std::vector<double> ys;
    for (int l = 0; l < c.lanes; ++l)
        ys.push_back(c.road_offset + c.lane_width * l);
    return ys;
}

}  // namespace

ModalitySet ModalitySet::parse(const std::string& letters) {
    ModalitySet s;
    for (char ch : letters) {
        auto it = std::find(kModalityLetters.begin(), kModalityLetters.end(), ch);
        require(it != kModalityLetters.end(), "unknown modality letter '" + std::string(1, ch) + "' in \"" + letters + "\"");
        s.set(static_cast<int>(it - kModalityLetters.begin()));
    }
    require(!s.empty(), "modality set must not be empty");
    return s;
}

std::vector<int> ModalitySet::members() const {
    std::vector<int> out;
    for (int q = 0; q < kModalities; ++q)
        if (has(q))
            out.push_back(q);
    return out;
}

std::string ModalitySet::str() const {
    std::string s;
    for (int q : members())
        s.push_back(kModalityLetters[q]);
    return s;
}

const std::vector<double>& ModalitySample::feature(int q) const {
    switch (q) {
        case kGps:
            return gps;
        case kRgb:
            return rgb;
        default:
            return lidar;
    }
}

std::vector<double>& ModalitySample::feature(int q) {
    return const_cast<std::vector<double>&>(static_cast<const ModalitySample&>(*this).feature(q));
}

// ---------------------------------------------------------------------------
// Configuration

void ScenarioConfig::validate() const {
    require(n_t >= 1, "n_t must be >= 1");
    require(w >= 1, "w must be >= 1");
    require(sigma2 > 0, "sigma2 must be positive");
    require(p_max > 0, "p_max must be positive");
    require(rsu_height > 0, "rsu_height must be positive");
    require(coverage_deg > 0 && coverage_deg < 180, "coverage_deg must lie in (0, 180)");
    require(n_vehicles >= 1, "n_vehicles must be >= 1 (an empty road has no channels)");
    require(n_obstacles >= 0, "n_obstacles must be >= 0");
    require(gamma >= 0 && gamma < 1, "gamma must lie in [0, 1)");
    require(d_r >= 1 && d_l >= 1, "d_r and d_l must be >= 1");
    require(paths >= 0, "paths must be >= 0");
    require(!modality_sets.empty(), "modality_sets must list at least one set");
    for (const auto& m : modality_sets)
        require(m.has(kGps), "modality set \"" + m.str() + "\" lacks G; GPS is always present");
    for (double r : availability_rates)
        require(r >= 0 && r <= 1, "availability_rates must lie in [0, 1]");
    require(availability_rates[kGps] == 1.0, "availability_rates.G must be 1 (GPS is always on)");
    require(timesteps >= 1, "timesteps must be >= 1");
    require(speed > 0, "speed must be positive");
    require(dt > 0, "dt must be positive");
    require(road_offset > 0, "road_offset must be positive");
    require(lanes >= 1, "lanes must be >= 1");
    require(gps_noise >= 0 && clutter >= 0 && lidar_noise >= 0, "noise levels must be >= 0");
    require(trajectory == "shared" || trajectory == "segmented", "trajectory must be \"shared\" or \"segmented\"");
}

ScenarioConfig ScenarioConfig::from_json_text(const std::string& text) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ContractViolation(std::string("scenario config is not valid JSON: ") + e.what());
    }
    require(j.is_object(), "scenario config must be a JSON object");
    static const std::set<std::string> required = {"n_t",        "w",     "sigma2", "p_max",        "rsu_height",
                                                   "coverage_deg", "n_vehicles", "n_obstacles", "gamma", "seed",
                                                   "d_r",        "d_l",   "paths",  "modality_sets", "availability_rates"};
    static const std::set<std::string> optional = {"timesteps", "speed",     "dt",      "road_offset",
                                                   "lanes",     "lane_width", "gps_noise", "clutter",
                                                   "lidar_noise", "obstacle_speed", "trajectory"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(required.contains(it.key()) || optional.contains(it.key()), "unknown scenario key '" + it.key() + "'");
    for (const auto& k : required)
        require(j.contains(k), "missing required scenario key '" + k + "'");

    ScenarioConfig c;
    auto num = [&](const char* key, auto& out) {
        const auto& v = j.at(key);
        require(v.is_number(), std::string("scenario key '") + key + "' must be a number");
        out = v.get<std::remove_reference_t<decltype(out)>>();
    };
    try {
        num("n_t", c.n_t);
        num("w", c.w);
        num("sigma2", c.sigma2);
        num("p_max", c.p_max);
        num("rsu_height", c.rsu_height);
        num("coverage_deg", c.coverage_deg);
        num("n_vehicles", c.n_vehicles);
        num("n_obstacles", c.n_obstacles);
        num("gamma", c.gamma);
        num("seed", c.seed);
        num("d_r", c.d_r);
        num("d_l", c.d_l);
        num("paths", c.paths);
        c.modality_sets.clear();
        require(j.at("modality_sets").is_array(), "scenario key 'modality_sets' must be an array of strings");
        for (const auto& s : j.at("modality_sets"))
            c.modality_sets.push_back(ModalitySet::parse(s.get<std::string>()));
        const auto& rates = j.at("availability_rates");
        require(rates.is_object(), "scenario key 'availability_rates' must be an object like {\"R\": 0.8}");
        c.availability_rates = {1.0, 1.0, 1.0};
        for (auto it = rates.begin(); it != rates.end(); ++it) {
            require(it.key().size() == 1, "availability_rates key '" + it.key() + "' is not a modality letter");
            const int q = ModalitySet::parse(it.key()).members().front();
            c.availability_rates[q] = it.value().get<double>();
        }
        if (j.contains("timesteps"))
            num("timesteps", c.timesteps);
        if (j.contains("speed"))
            num("speed", c.speed);
        if (j.contains("dt"))
            num("dt", c.dt);
        if (j.contains("road_offset"))
            num("road_offset", c.road_offset);
        if (j.contains("lanes"))
            num("lanes", c.lanes);
        if (j.contains("lane_width"))
            num("lane_width", c.lane_width);
        if (j.contains("gps_noise"))
            num("gps_noise", c.gps_noise);
        if (j.contains("clutter"))
            num("clutter", c.clutter);
        if (j.contains("lidar_noise"))
            num("lidar_noise", c.lidar_noise);
        if (j.contains("obstacle_speed"))
            num("obstacle_speed", c.obstacle_speed);
        if (j.contains("trajectory"))
            c.trajectory = j.at("trajectory").get<std::string>();
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("scenario config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string ScenarioConfig::to_json_text() const {
    nlohmann::json j;
    j["n_t"] = n_t;
    j["w"] = w;
    j["sigma2"] = sigma2;
    j["p_max"] = p_max;
    j["rsu_height"] = rsu_height;
    j["coverage_deg"] = coverage_deg;
    j["n_vehicles"] = n_vehicles;
    j["n_obstacles"] = n_obstacles;
    j["gamma"] = gamma;
    j["seed"] = seed;
    j["d_r"] = d_r;
    j["d_l"] = d_l;
    j["paths"] = paths;
    j["modality_sets"] = nlohmann::json::array();
    for (const auto& m : modality_sets)
        j["modality_sets"].push_back(m.str());
    for (int q = 0; q < kModalities; ++q)
        j["availability_rates"][std::string(1, kModalityLetters[q])] = availability_rates[q];
    j["timesteps"] = timesteps;
    j["speed"] = speed;
    j["dt"] = dt;
    j["road_offset"] = road_offset;
    j["lanes"] = lanes;
    j["lane_width"] = lane_width;
    j["gps_noise"] = gps_noise;
    j["clutter"] = clutter;
    j["lidar_noise"] = lidar_noise;
    j["obstacle_speed"] = obstacle_speed;
    j["trajectory"] = trajectory;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Codebook and channels

Eigen::VectorXcd array_response(int n_t, double u) {
    Eigen::VectorXcd a(n_t);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n_t));
    for (int n = 0; n < n_t; ++n)
        a(n) = std::polar(norm, kPi * n * u);
    return a;
}

Codebook make_codebook(int n_t, int w, double sector_rad) {
    require(n_t >= 1 && w >= 1, "make_codebook: N_t and W must be >= 1");
    const double umax = std::sin(sector_rad / 2.0);
    const double step = 2.0 * umax / w;
    Codebook c(n_t, w);
    for (int i = 0; i < w; ++i)
        c.col(i) = array_response(n_t, -umax + (i + 0.5) * step);
    return c;
}

bool segment_hits_rectangle(Vec2 a, Vec2 b, const Obstacle& o) {
    const double len = dist2(a, b);
    if (len == 0.0)
        return ray_rectangle(a, {1.0, 0.0}, o) == 0.0;
    const Vec2 dir{(b.x - a.x) / len, (b.y - a.y) / len};
    const double s = ray_rectangle(a, dir, o);
    return s >= 0.0 && s <= len;
}

double los_direction_cosine(const Scenario& s, Vec2 p) {
    const double h = s.cfg.rsu_height;
    return p.x / std::sqrt(p.x * p.x + p.y * p.y + h * h);
}

std::vector<Obstacle> obstacles_at(const Scenario& s, double time) {
    std::vector<Obstacle> out = s.obstacles;
    for (auto& o : out) {
        if (o.vx == 0.0)
            continue;
        const double half = (o.x1 - o.x0) / 2.0;
        const double cx = wrap_into((o.x0 + o.x1) / 2.0 + o.vx * time, -s.road_half_length, s.road_half_length);
        o.x0 = cx - half;
        o.x1 = cx + half;
    }
    return out;
}

Eigen::VectorXcd channel_at(const Scenario& s, Vec2 p, const std::vector<Obstacle>& obstacles, bool* blocked) {
    const int n_t = s.cfg.n_t;
    const double h = s.cfg.rsu_height;
    const double scale = std::sqrt(static_cast<double>(n_t));
    Eigen::VectorXcd ch = Eigen::VectorXcd::Zero(n_t);

    bool is_blocked = false;
    for (const auto& o : obstacles)
        is_blocked = is_blocked || segment_hits_rectangle({0.0, 0.0}, p, o);
    if (blocked)
        *blocked = is_blocked;
    if (!is_blocked) {
        const double d = std::sqrt(p.x * p.x + p.y * p.y + h * h);
        const double phase = -2.0 * kPi * d / kWavelength;
        ch += scale * std::polar(1.0 / d, phase) * array_response(n_t, p.x / d);
    }
    for (std::size_t i = 0; i < s.scatterers.size(); ++i) {
        const Vec2 sc = s.scatterers[i];
        const double d1 = std::sqrt(sc.x * sc.x + sc.y * sc.y + h * h);
        const double d2 = dist2(sc, p);
        const double phase = -2.0 * kPi * (d1 + d2) / kWavelength + s.scatterer_phase[i];
        ch += scale * std::polar(kReflectionAmplitude / (d1 + d2), phase) * array_response(n_t, sc.x / d1);
    }
    return ch;
}

std::vector<double> rss(const Eigen::VectorXcd& h, const Codebook& c) {
    require(h.size() == c.rows(), "rss: channel length does not match codebook");
    std::vector<double> r(c.cols());
    for (int i = 0; i < c.cols(); ++i)
        r[i] = std::norm(h.dot(c.col(i)));  // dot conjugates the first argument
    return r;
}

std::vector<int> quantize(const std::vector<double>& r, double gamma) {
    require(gamma >= 0 && gamma < 1, "quantize: gamma must lie in [0, 1)");
    const double mx = r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());
    std::vector<int> v(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i)
        v[i] = r[i] > gamma * mx ? 1 : 0;
    return v;
}

// ---------------------------------------------------------------------------
// Scenario synthesis

namespace {

std::vector<double> rgb_signature(const Scenario& s, Vec2 p, bool blocked, Rng& rng) {
    const int bins = s.cfg.d_r;
    std::vector<double> e(bins, 0.0);
    auto deposit = [&](Vec2 src, double energy) {
        // angle of arrival seen from the vehicle, linearly shared between neighbouring bins
        const double ang = std::atan2(src.y - p.y, src.x - p.x);
        const double pos = (ang + kPi) / (2.0 * kPi) * bins - 0.5;
        const double fl = std::floor(pos);
        const double frac = pos - fl;
        const int b0 = static_cast<int>(((static_cast<long>(fl) % bins) + bins) % bins);
        const int b1 = (b0 + 1) % bins;
        e[b0] += (1.0 - frac) * energy;
        e[b1] += frac * energy;
    };
    const double h = s.cfg.rsu_height;
    if (!blocked) {
        const double d = std::sqrt(p.x * p.x + p.y * p.y + h * h);
        deposit({0.0, 0.0}, 1.0 / (d * d));
    }
    for (const auto& sc : s.scatterers) {
        const double d = std::sqrt(sc.x * sc.x + sc.y * sc.y + h * h) + dist2(sc, p);
        deposit(sc, kReflectionAmplitude * kReflectionAmplitude / (d * d));
    }
    const double mx = *std::max_element(e.begin(), e.end());
    for (auto& v : e)
        v = (mx > 0 ? v / mx : 0.0) + rng.normal(0.0, s.cfg.clutter);
    return e;
}

std::vector<double> lidar_scan(const Scenario& s, Vec2 p, const std::vector<Obstacle>& obstacles, Rng& rng) {
    const int rays = s.cfg.d_l;
    const double range = s.cfg.road_offset + s.cfg.lane_width * s.cfg.lanes;
    // The RSU pole is a fixed landmark visible to every scan.
    std::vector<Obstacle> scene = obstacles;
    scene.push_back({-0.5, -0.5, 0.5, 0.5, 0.0});
    std::vector<double> out(rays);
    for (int i = 0; i < rays; ++i) {
        // rays fan over the half plane facing the RSU
        const double ang = kPi + (i + 0.5) * kPi / rays;
        const Vec2 dir{std::cos(ang), std::sin(ang)};
        double best = -1.0;
        for (const auto& o : scene) {
            const double d = ray_rectangle(p, dir, o);
            if (d >= 0.0 && d <= range && (best < 0 || d < best))
                best = d;
        }
        out[i] = (best < 0 ? 0.0 : 1.0 - best / range) + rng.normal(0.0, s.cfg.lidar_noise);
    }
    return out;
}

}  // namespace

Dataset make_scenario(const ScenarioConfig& cfg) { return make_scenario(cfg, cfg.seed); }

Dataset make_scenario(const ScenarioConfig& cfg_in, std::uint64_t seed) {
    ScenarioConfig cfg = cfg_in;
    cfg.seed = seed;
    cfg.validate();
    Dataset d;
    Scenario& s = d.scenario;
    s.cfg = cfg;
    const double perp = std::hypot(cfg.road_offset, cfg.rsu_height);
    s.road_half_length = perp * std::tan(cfg.coverage_deg * kPi / 360.0);
    const double L = s.road_half_length;
    const auto lanes = lane_ys(cfg);
    const double far_side = lanes.back();

    Rng geo = Rng::substream(seed, "airsim:geometry");
    for (int p = 0; p < cfg.paths; ++p) {
        s.scatterers.push_back({geo.uniform(-L, L), far_side + geo.uniform(3.0, 12.0)});
        s.scatterer_phase.push_back(geo.uniform(0.0, 2.0 * kPi));
    }
    for (int o = 0; o < cfg.n_obstacles; ++o) {
        const double cx = geo.uniform(-0.8 * L, 0.8 * L);
        const double cy = geo.uniform(0.35, 0.75) * cfg.road_offset;
        const double hw = geo.uniform(1.5, 4.0);
        const double hd = geo.uniform(0.5, 1.5);
        const double vx = cfg.obstacle_speed * (geo.bernoulli(0.5) ? 1.0 : -1.0);
        s.obstacles.push_back({cx - hw, cy - hd, cx + hw, cy + hd, vx});
    }

    const int K = cfg.n_vehicles;
    std::vector<std::pair<double, double>> ranges(K, {-L, L});
    if (cfg.trajectory == "segmented")
        for (int k = 0; k < K; ++k)
            ranges[k] = {-L + 2.0 * L * k / K, -L + 2.0 * L * (k + 1) / K};
    for (int k = 0; k < K; ++k) {
        VehicleState v;
        v.position = {geo.uniform(ranges[k].first, ranges[k].second), lanes[k % lanes.size()]};
        v.velocity = cfg.speed;
        v.modalities = cfg.modality_sets[k % cfg.modality_sets.size()];
        for (int q = 0; q < kModalities; ++q)
            v.availability[q] = v.modalities.has(q) ? cfg.availability_rates[q] : 0.0;
        s.vehicles.push_back(v);
    }

    d.codebook = make_codebook(cfg.n_t, cfg.w, cfg.coverage_deg * kPi / 180.0);
    d.streams.assign(K, {});
    const int T = cfg.timesteps;
    for (int k = 0; k < K; ++k) {
        Rng feat = Rng::substream(seed, "airsim:features:" + std::to_string(k));
        Rng avail = Rng::substream(seed, "airsim:availability:" + std::to_string(k));
        // exactly round(rate * T) available samples per modality, so completeness is exact
        std::array<std::vector<bool>, kModalities> present;
        for (int q = 0; q < kModalities; ++q) {
            present[q].assign(T, false);
            const auto count = static_cast<std::size_t>(std::lround(s.vehicles[k].availability[q] * T));
            auto order = avail.permutation(T);
            for (std::size_t i = 0; i < count; ++i)
                present[q][order[i]] = true;
        }
        const auto& veh = s.vehicles[k];
        for (int t = 0; t < T; ++t) {
            const double time = t * cfg.dt;
            Vec2 p{wrap_into(veh.position.x + veh.velocity * time, ranges[k].first, ranges[k].second), veh.position.y};
            const auto obstacles = obstacles_at(s, time);
            ModalitySample smp;
            smp.vehicle = k;
            smp.t = t;
            smp.position = p;
            smp.channel = channel_at(s, p, obstacles, &smp.los_blocked);
            smp.rss = rss(smp.channel, d.codebook);
            smp.label = quantize(smp.rss, cfg.gamma);
            smp.gps = {p.x + feat.normal(0.0, cfg.gps_noise), p.y + feat.normal(0.0, cfg.gps_noise)};
            smp.rgb = rgb_signature(s, p, smp.los_blocked, feat);
            smp.lidar = lidar_scan(s, p, obstacles, feat);
            for (int q = 0; q < kModalities; ++q)
                smp.available[q] = present[q][t];
            d.streams[k].push_back(std::move(smp));
        }
    }
    return d;
}

ChannelSet Dataset::channels_at(int t) const {
    ChannelSet h(scenario.cfg.n_t, vehicles());
    for (int k = 0; k < vehicles(); ++k)
        h.col(k) = streams[k][t].channel;
    return h;
}

FeedbackMatrix Dataset::feedback_at(int t) const {
    FeedbackMatrix v(scenario.cfg.w, vehicles());
    for (int k = 0; k < vehicles(); ++k)
        for (int i = 0; i < scenario.cfg.w; ++i)
            v(i, k) = streams[k][t].label[i];
    return v;
}

// ---------------------------------------------------------------------------
// Rates and overhead accounting

Eigen::MatrixXcd beam_domain(const ChannelSet& h, const Codebook& c) {
    require(h.rows() == c.rows(), "beam_domain: channel and codebook antenna counts differ");
    return h.adjoint() * c;
}

RateResult sum_rate(const Eigen::MatrixXcd& g, const Strategy& t, double sigma2) {
    require(g.cols() == t.rows() && g.rows() == t.cols(), "sum_rate: G is K x W and T must be W x K");
    require(sigma2 > 0, "sum_rate: sigma2 must be positive");
    const Eigen::MatrixXcd a = g * t.cast<cd>();
    const auto K = static_cast<int>(g.rows());
    RateResult r;
    r.per_user.resize(K);
    for (int k = 0; k < K; ++k) {
        double interference = 0.0;
        for (int i = 0; i < K; ++i)
            if (i != k)
                interference += std::norm(a(k, i));
        r.per_user[k] = std::log2(1.0 + std::norm(a(k, k)) / (interference + sigma2));
        r.total += r.per_user[k];
    }
    return r;
}

RateResult sum_rate(const ChannelSet& h, const Codebook& c, const Strategy& t, double sigma2) {
    return sum_rate(beam_domain(h, c), t, sigma2);
}

RateResult sum_rate_precoded(const ChannelSet& h, const Eigen::MatrixXcd& f, double sigma2) {
    require(h.rows() == f.rows() && h.cols() == f.cols(), "sum_rate_precoded: H and F must both be N_t x K");
    const Eigen::MatrixXcd a = h.adjoint() * f;
    RateResult r;
    const auto K = static_cast<int>(h.cols());
    r.per_user.resize(K);
    for (int k = 0; k < K; ++k) {
        double interference = 0.0;
        for (int i = 0; i < K; ++i)
            if (i != k)
                interference += std::norm(a(k, i));
        r.per_user[k] = std::log2(1.0 + std::norm(a(k, k)) / (interference + sigma2));
        r.total += r.per_user[k];
    }
    return r;
}

double contact_time(double height, double coverage_rad, double velocity) {
    require(velocity > 0, "contact_time: velocity must be positive");
    require(coverage_rad >= 0 && coverage_rad < kPi, "contact_time: coverage angle must lie in [0, pi)");
    return 2.0 * height * std::tan(coverage_rad / 2.0) / velocity;
}

double coherence_time(double contact, int w) {
    require(w >= 1, "coherence_time: W must be >= 1");
    return contact / w;
}

double effective_sum_rate(double rate, double t_delay, double t_coher) {
    require(t_delay >= 0, "effective_sum_rate: delay must be >= 0");
    if (t_delay >= t_coher)
        throw ContractViolation("effective_sum_rate: alignment delay must be shorter than the coherence time");
    return (t_coher - t_delay) / t_coher * rate;
}

int feedback_bits(FeedbackScheme scheme, int w, int rss_bits) {
    require(w >= 1, "feedback_bits: W must be >= 1");
    switch (scheme) {
        case FeedbackScheme::full_rss:
            return rss_bits;
        case FeedbackScheme::sweep_index: {
            int bits = 0;
            while ((1 << bits) < w)
                ++bits;
            return bits;
        }
        case FeedbackScheme::gba:
            return w;
    }
    return 0;
}

std::vector<OverheadRow> overhead_table(const OverheadConfig& cfg) {
    struct Entry {
        const char* name;
        FeedbackScheme scheme;
        double init;
    };
    const Entry entries[] = {{"WMMSE w/ channel estimation", FeedbackScheme::full_rss, cfg.t_init_ce_s},
                             {"ZF w/ beam sweeping", FeedbackScheme::sweep_index, cfg.t_init_sweep_s},
                             {"GBA", FeedbackScheme::gba, cfg.t_init_gba_s}};
    std::vector<OverheadRow> rows;
    for (const auto& e : entries) {
        OverheadRow r;
        r.scheme = e.name;
        r.bits = feedback_bits(e.scheme, cfg.w, cfg.rss_bits);
        r.feedback_latency_s = r.bits / cfg.backhaul_bps;
        r.delay_s = e.init;
        r.period_fraction = (e.init + r.feedback_latency_s) / cfg.t_coher_s;
        rows.push_back(r);
    }
    return rows;
}

void export_dataset_csv(const std::filesystem::path& path, const Dataset& d, const std::vector<ModalitySample>& extra) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write dataset '" + path.string() + "'");
    const auto& c = d.scenario.cfg;
    os << "# beamgraph dataset v1 vehicles=" << d.vehicles() << " timesteps=" << d.timesteps() << " w=" << c.w
       << " d_r=" << c.d_r << " d_l=" << c.d_l << " seed=" << c.seed << '\n';
    os << "vehicle,t,synthetic,avail_G,avail_R,avail_L,gps_x,gps_y";
    for (int i = 0; i < c.d_r; ++i)
        os << ",rgb_" << i;
    for (int i = 0; i < c.d_l; ++i)
        os << ",lidar_" << i;
    for (int i = 0; i < c.w; ++i)
        os << ",v_" << i;
    os << '\n';
    os.precision(17);
    auto write = [&](const ModalitySample& s) {
        os << s.vehicle << ',' << s.t << ',' << (s.synthetic ? 1 : 0);
        for (int q = 0; q < kModalities; ++q)
            os << ',' << (s.available[q] ? 1 : 0);
        for (int q = 0; q < kModalities; ++q)
            for (double v : s.feature(q))
                os << ',' << v;
        for (int b : s.label)
            os << ',' << b;
        os << '\n';
    };
    for (const auto& stream : d.streams)
        for (const auto& s : stream)
            write(s);
    for (const auto& s : extra)
        write(s);
}

}  // namespace beamgraph::air

// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/expcli.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "beamgraph/checkpoint.hpp"
#include "json.hpp"

#ifndef BEAMGRAPH_GIT_DESCRIBE
#define BEAMGRAPH_GIT_DESCRIBE "unknown"
#endif

namespace beamgraph::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using tk::ParameterStore;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported by their dotted path.
class Section {
  public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j_.is_object(), where() + " must be a JSON object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void get(const char* key, int& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_number_integer(), "config key '" + name(key) + "' must be an integer");
        out = v.get<int>();
    }
    void get(const char* key, std::uint64_t& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0),
                "config key '" + name(key) + "' must be a non-negative integer");
        out = v.get<std::uint64_t>();
    }
    void get(const char* key, double& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_number(), "config key '" + name(key) + "' must be a number");
        out = v.get<double>();
    }
    void get(const char* key, bool& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_boolean(), "config key '" + name(key) + "' must be true or false");
        out = v.get<bool>();
    }
    void get(const char* key, std::string& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_string(), "config key '" + name(key) + "' must be a string");
        out = v.get<std::string>();
    }
    void get(const char* key, std::array<int, air::kModalities>& out) {
        if (!take(key))
            return;
        const auto& v = j_.at(key);
        require(v.is_array() && v.size() == out.size(),
                "config key '" + name(key) + "' must be an array of " + std::to_string(out.size()) + " integers");
        for (std::size_t i = 0; i < out.size(); ++i) {
            require(v[i].is_number_integer(), "config key '" + name(key) + "' must hold integers");
            out[i] = v[i].get<int>();
        }
    }

    std::optional<Section> child(const char* key) {
        if (!take(key))
            return std::nullopt;
        return Section(j_.at(key), name(key));
    }

    // Throws on the first key that no getter consumed.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            require(seen_.contains(it.key()), "unknown config key '" + name(it.key()) + "'");
    }

  private:
    bool take(const char* key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "run config" : "config section '" + path_ + "'"; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require_positive(int v, const std::string& key) { require(v >= 1, "config key '" + key + "' must be >= 1"); }
void require_rate(double v, const std::string& key) {
    require(std::isfinite(v) && v > 0, "config key '" + key + "' must be a positive number");
}
void require_probability(double v, const std::string& key) {
    require(v >= 0 && v < 1, "config key '" + key + "' must lie in [0, 1)");
}

template <class F>
void stage(const std::string& name, F&& body) {
    try {
        body();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

const air::ModalitySample* sample_at(const air::Dataset& d, int k, int t) { return &d.streams[k][t]; }

std::vector<rsu::Snapshot> truth_snapshots(const air::Dataset& d, const std::vector<int>& ts) {
    std::vector<rsu::Snapshot> out;
    out.reserve(ts.size());
    for (int t : ts)
        out.push_back({d.feedback_at(t), air::beam_domain(d.channels_at(t), d.codebook)});
    return out;
}

// Feedback each vehicle would report at the given timesteps, predicted by its
// pruned model from the modalities it holds.
std::vector<rsu::Snapshot> predicted_snapshots(const Workspace& ws, const ParameterStore& vehicle,
                                               const std::vector<int>& ts) {
    const auto vcfg = vehicle_config(ws.cfg);
    const int K = ws.data.vehicles();
    std::vector<veh::PrunedModel> models;
    for (int k = 0; k < K; ++k)
        models.push_back(veh::prune_for(ws.clients[k].set, vehicle, vcfg));
    std::vector<rsu::Snapshot> out;
    out.reserve(ts.size());
    for (int t : ts) {
        rsu::Snapshot s{air::FeedbackMatrix::Zero(ws.cfg.scenario.w, K),
                        air::beam_domain(ws.data.channels_at(t), ws.data.codebook)};
        for (int k = 0; k < K; ++k) {
            const auto p = veh::predict(models[k], {sample_at(ws.data, k, t)});
            for (int w = 0; w < s.v.rows(); ++w)
                s.v(w, k) = p(0, w) > 0.5 ? 1 : 0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

rsu::TrainConfig rsu_train_config(const RunConfig& c, int epochs, int batch, double lr, double wd, double p_error) {
    rsu::TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.lr = lr;
    tc.weight_decay = wd;
    tc.p_drop = c.perturbation.random_dropping ? c.perturbation.p_drop : 0.0;
    tc.p_error = p_error;
    tc.sigma2 = c.scenario.sigma2;
    tc.projection = projection(c);
    return tc;
}

void add_metric(Workspace& ws, const std::string& stage_name, const std::string& name, double value) {
    ws.metrics.push_back({stage_name, name, value});
}

void add_trace(Workspace& ws, const std::string& stage_name, const std::vector<rsu::EpochStats>& trace) {
    std::erase_if(ws.loss_trace, [&](const LossRow& r) { return r.stage == stage_name; });
    for (const auto& e : trace)
        ws.loss_trace.push_back({stage_name, e.epoch, e.loss, e.sum_rate});
}

void add_accuracy(Workspace& ws, const std::string& stage_name, const ParameterStore& params) {
    const auto a = fed::test_accuracy(ws.clients, params, vehicle_config(ws.cfg));
    add_metric(ws, stage_name, "test_exact", a.exact);
    add_metric(ws, stage_name, "test_f1", a.f1);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos)
        return s;
    std::string out = "\"";
    for (char ch : s)
        out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
}

// Splits one CSV record, honouring double-quoted fields.
std::vector<std::string> csv_fields(const std::string& line) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"')
                out.back() += '"', ++i;
            else if (ch == '"')
                quoted = false;
            else
                out.back() += ch;
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.emplace_back();
        } else {
            out.back() += ch;
        }
    }
    return out;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p);
    if (!os)
        throw std::runtime_error("cannot write " + p.string());
    os.precision(17);
    return os;
}

// Rows of an earlier metrics.csv in the same directory whose (stage, metric)
// this run did not recompute are kept.
std::vector<Metric> merged_metrics(const std::vector<Metric>& fresh, const fs::path& path) {
    std::vector<Metric> out;
    std::ifstream is(path);
    std::string line;
    std::set<std::pair<std::string, std::string>> recomputed;
    for (const auto& m : fresh)
        recomputed.insert({m.stage, m.name});
    int row = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#' || row++ == 0)
            continue;
        const auto f = csv_fields(line);
        if (f.size() != 3 || recomputed.contains({f[0], f[1]}))
            continue;
        out.push_back({f[0], f[1], std::stod(f[2])});
    }
    out.insert(out.end(), fresh.begin(), fresh.end());
    return out;
}

std::vector<LossRow> merged_trace(const std::vector<LossRow>& fresh, const fs::path& path) {
    std::vector<LossRow> out;
    std::set<std::string> recomputed;
    for (const auto& r : fresh)
        recomputed.insert(r.stage);
    std::ifstream is(path);
    std::string line;
    int row = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#' || row++ == 0)
            continue;
        const auto f = csv_fields(line);
        if (f.size() != 4 || recomputed.contains(f[0]))
            continue;
        out.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3])});
    }
    out.insert(out.end(), fresh.begin(), fresh.end());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
    scenario.validate();
    require_positive(model.d_g, "model.d_g");
    require_positive(model.rsu_hidden, "model.rsu_hidden");
    for (int v : model.latent)
        require_positive(v, "model.latent");
    require_positive(model.enc_hidden, "model.enc_hidden");
    require_positive(model.fuse_hidden, "model.fuse_hidden");

    require_positive(stage1.epochs, "stage1.epochs");
    require_positive(stage1.batch_size, "stage1.batch_size");
    require_rate(stage1.lr, "stage1.lr");
    require(stage1.weight_decay >= 0, "config key 'stage1.weight_decay' must be >= 0");

    require_positive(stage2.rounds, "stage2.rounds");
    require_positive(stage2.local_epochs, "stage2.local_epochs");
    require_positive(stage2.batch_size, "stage2.batch_size");
    require_rate(stage2.lr, "stage2.lr");
    require(stage2.weight_decay >= 0, "config key 'stage2.weight_decay' must be >= 0");
    require(stage2.train_fraction > 0 && stage2.train_fraction < 1,
            "config key 'stage2.train_fraction' must lie in (0, 1)");

    require_positive(stage3.epochs, "stage3.epochs");
    require_positive(stage3.batch_size, "stage3.batch_size");
    require_rate(stage3.lr, "stage3.lr");
    require(stage3.weight_decay >= 0, "config key 'stage3.weight_decay' must be >= 0");

    require_probability(perturbation.p_drop, "perturbation.p_drop");
    require_probability(perturbation.p_error, "perturbation.p_error");
    rsu::ProjectionConfig p = projection;
    p.p_max = scenario.p_max;
    p.validate();

    require(da.alpha >= 0 && da.beta >= 0, "config keys 'da.alpha' and 'da.beta' must be >= 0");
    require_positive(da.l_h, "da.l_h");
    require_rate(da.har_lr, "da.har_lr");
    require_positive(da.gen_count, "da.gen_count");
    require(da.gen_batch_size >= 2, "config key 'da.gen_batch_size' must be >= 2");
    require_positive(da.gen_steps, "da.gen_steps");
    require_rate(da.gen_lr, "da.gen_lr");
    require_positive(da.combos, "da.combos");
    require_positive(da.max_per_combo, "da.max_per_combo");
    require_positive(da.finetune_rounds, "da.finetune_rounds");

    require(baselines.rss_paths >= 1 && baselines.rss_paths <= scenario.w,
            "config key 'baselines.rss_paths' must lie in [1, scenario.w]");
    require_positive(baselines.wmmse_iters, "baselines.wmmse_iters");

    require(overhead.t_coher_s > 0, "config key 'overhead.t_coher_s' must be positive");
    require(overhead.t_init_ce_s >= 0 && overhead.t_init_sweep_s >= 0 && overhead.t_init_gba_s >= 0,
            "overhead initialisation times must be >= 0");
    require(overhead.backhaul_bps > 0, "config key 'overhead.backhaul_bps' must be positive");
    require_positive(overhead.rss_bits, "overhead.rss_bits");
    require_positive(overhead.w, "overhead.w");
    require(!output_dir.empty(), "config key 'output_dir' must not be empty");
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ContractViolation(std::string("run config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    Section root(j, "");
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    require(root.has("scenario"), "missing required config key 'scenario'");
    c.scenario = air::ScenarioConfig::from_json_text(root.raw("scenario").dump());

    if (auto s = root.child("model")) {
        s->get("d_g", c.model.d_g);
        s->get("rsu_hidden", c.model.rsu_hidden);
        s->get("latent", c.model.latent);
        s->get("enc_hidden", c.model.enc_hidden);
        s->get("fuse_hidden", c.model.fuse_hidden);
        s->finish();
    }
    if (auto s = root.child("stage1")) {
        s->get("epochs", c.stage1.epochs);
        s->get("batch_size", c.stage1.batch_size);
        s->get("lr", c.stage1.lr);
        s->get("weight_decay", c.stage1.weight_decay);
        s->finish();
    }
    if (auto s = root.child("stage2")) {
        s->get("rounds", c.stage2.rounds);
        s->get("local_epochs", c.stage2.local_epochs);
        s->get("batch_size", c.stage2.batch_size);
        s->get("lr", c.stage2.lr);
        s->get("weight_decay", c.stage2.weight_decay);
        s->get("train_fraction", c.stage2.train_fraction);
        s->get("size_weighted", c.stage2.size_weighted);
        s->finish();
    }
    if (auto s = root.child("stage3")) {
        s->get("epochs", c.stage3.epochs);
        s->get("batch_size", c.stage3.batch_size);
        s->get("lr", c.stage3.lr);
        s->get("weight_decay", c.stage3.weight_decay);
        s->finish();
    }
    if (auto s = root.child("perturbation")) {
        s->get("p_drop", c.perturbation.p_drop);
        s->get("p_error", c.perturbation.p_error);
        s->get("random_dropping", c.perturbation.random_dropping);
        s->finish();
    }
    if (auto s = root.child("projection")) {
        s->get("tau", c.projection.tau);
        s->get("prune_fraction", c.projection.prune_fraction);
        s->get("non_negativity", c.projection.non_negativity);
        s->get("re_normalization", c.projection.re_normalization);
        s->finish();
    }
    if (auto s = root.child("da")) {
        s->get("da_minus", c.da.da_minus);
        s->get("da_plus", c.da.da_plus);
        s->get("alpha", c.da.alpha);
        s->get("beta", c.da.beta);
        s->get("l_h", c.da.l_h);
        s->get("har_lr", c.da.har_lr);
        s->get("keep_bias", c.da.keep_bias);
        s->get("gen_count", c.da.gen_count);
        s->get("gen_batch_size", c.da.gen_batch_size);
        s->get("gen_steps", c.da.gen_steps);
        s->get("gen_lr", c.da.gen_lr);
        s->get("combos", c.da.combos);
        s->get("max_per_combo", c.da.max_per_combo);
        s->get("finetune_rounds", c.da.finetune_rounds);
        s->finish();
    }
    if (auto s = root.child("baselines")) {
        s->get("wmmse", c.baselines.wmmse);
        s->get("zf_sweep", c.baselines.zf_sweep);
        s->get("oracle", c.baselines.oracle);
        s->get("rss_paths", c.baselines.rss_paths);
        s->get("wmmse_iters", c.baselines.wmmse_iters);
        s->finish();
    }
    if (auto s = root.child("overhead")) {
        s->get("t_coher_s", c.overhead.t_coher_s);
        s->get("t_init_ce_s", c.overhead.t_init_ce_s);
        s->get("t_init_sweep_s", c.overhead.t_init_sweep_s);
        s->get("t_init_gba_s", c.overhead.t_init_gba_s);
        s->get("backhaul_bps", c.overhead.backhaul_bps);
        s->get("rss_bits", c.overhead.rss_bits);
        s->get("w", c.overhead.w);
        s->finish();
    }
    root.finish();
    c.validate();
    return c;
}

std::string RunConfig::to_json_text() const {
    json j;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["scenario"] = json::parse(scenario.to_json_text());
    j["model"] = {{"d_g", model.d_g},
                  {"rsu_hidden", model.rsu_hidden},
                  {"latent", model.latent},
                  {"enc_hidden", model.enc_hidden},
                  {"fuse_hidden", model.fuse_hidden}};
    j["stage1"] = {{"epochs", stage1.epochs},
                   {"batch_size", stage1.batch_size},
                   {"lr", stage1.lr},
                   {"weight_decay", stage1.weight_decay}};
    j["stage2"] = {{"rounds", stage2.rounds},
                   {"local_epochs", stage2.local_epochs},
                   {"batch_size", stage2.batch_size},
                   {"lr", stage2.lr},
                   {"weight_decay", stage2.weight_decay},
                   {"train_fraction", stage2.train_fraction},
                   {"size_weighted", stage2.size_weighted}};
    j["stage3"] = {{"epochs", stage3.epochs},
                   {"batch_size", stage3.batch_size},
                   {"lr", stage3.lr},
                   {"weight_decay", stage3.weight_decay}};
    j["perturbation"] = {{"p_drop", perturbation.p_drop},
                         {"p_error", perturbation.p_error},
                         {"random_dropping", perturbation.random_dropping}};
    j["projection"] = {{"tau", projection.tau},
                       {"prune_fraction", projection.prune_fraction},
                       {"non_negativity", projection.non_negativity},
                       {"re_normalization", projection.re_normalization}};
    j["da"] = {{"da_minus", da.da_minus},
               {"da_plus", da.da_plus},
               {"alpha", da.alpha},
               {"beta", da.beta},
               {"l_h", da.l_h},
               {"har_lr", da.har_lr},
               {"keep_bias", da.keep_bias},
               {"gen_count", da.gen_count},
               {"gen_batch_size", da.gen_batch_size},
               {"gen_steps", da.gen_steps},
               {"gen_lr", da.gen_lr},
               {"combos", da.combos},
               {"max_per_combo", da.max_per_combo},
               {"finetune_rounds", da.finetune_rounds}};
    j["baselines"] = {{"wmmse", baselines.wmmse},
                      {"zf_sweep", baselines.zf_sweep},
                      {"oracle", baselines.oracle},
                      {"rss_paths", baselines.rss_paths},
                      {"wmmse_iters", baselines.wmmse_iters}};
    j["overhead"] = {{"t_coher_s", overhead.t_coher_s},
                     {"t_init_ce_s", overhead.t_init_ce_s},
                     {"t_init_sweep_s", overhead.t_init_sweep_s},
                     {"t_init_gba_s", overhead.t_init_gba_s},
                     {"backhaul_bps", overhead.backhaul_bps},
                     {"rss_bits", overhead.rss_bits},
                     {"w", overhead.w}};
    return j.dump(2);
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), "cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return RunConfig::from_json_text(ss.str());
}

rsu::RsuConfig rsu_config(const RunConfig& c) {
    return {.w = c.scenario.w, .d_g = c.model.d_g, .hidden = c.model.rsu_hidden};
}

veh::VehicleConfig vehicle_config(const RunConfig& c) {
    auto v = veh::vehicle_config_for(c.scenario);
    v.latent = c.model.latent;
    v.enc_hidden = c.model.enc_hidden;
    v.fuse_hidden = c.model.fuse_hidden;
    return v;
}

rsu::ProjectionConfig projection(const RunConfig& c) {
    auto p = c.projection;
    p.p_max = c.scenario.p_max;
    return p;
}

fed::FlConfig fl_config(const RunConfig& c) {
    fed::FlConfig f;
    f.rounds = c.stage2.rounds;
    f.local_epochs = c.stage2.local_epochs;
    f.local.lr = c.stage2.lr;
    f.local.weight_decay = c.stage2.weight_decay;
    f.local.batch_size = c.stage2.batch_size;
    f.size_weighted = c.stage2.size_weighted;
    return f;
}

bal::DaMinusConfig da_minus_config(const RunConfig& c) {
    bal::DaMinusConfig d;
    d.alpha = c.da.alpha;
    d.beta = c.da.beta;
    d.har = {.l_h = c.da.l_h, .lr = c.da.har_lr, .keep_bias = c.da.keep_bias};
    d.projection = projection(c);
    d.sigma2 = c.scenario.sigma2;
    return d;
}

bal::DaPlusConfig da_plus_config(const RunConfig& c) {
    bal::DaPlusConfig d;
    d.gen = {.count = c.da.gen_count, .batch_size = c.da.gen_batch_size, .steps = c.da.gen_steps, .lr = c.da.gen_lr};
    d.combos = static_cast<std::size_t>(c.da.combos);
    d.max_per_combo = c.da.max_per_combo;
    d.finetune = fl_config(c);
    d.finetune.rounds = c.da.finetune_rounds;
    return d;
}

Timing timing_for(const RunConfig& c) {
    Timing t;
    const double contact = air::contact_time(c.scenario.rsu_height, c.scenario.coverage_deg * kPi / 180.0,
                                             c.scenario.speed);
    t.t_coher = air::coherence_time(contact, c.scenario.w);
    for (const auto& row : air::overhead_table(c.overhead)) {
        if (row.scheme == "GBA")
            t.t_delay_gba = row.delay_s;
        else if (row.scheme == "WMMSE w/ channel estimation")
            t.t_delay_wmmse = row.delay_s;
        else if (row.scheme == "ZF w/ beam sweeping")
            t.t_delay_sweep = row.delay_s;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Stages

Workspace prepare(const RunConfig& cfg) {
    cfg.validate();
    Workspace ws;
    ws.cfg = cfg;
    stage("scenario", [&] {
        ws.data = air::make_scenario(cfg.scenario);
        ws.split = fed::split_timesteps(cfg.scenario.timesteps, cfg.stage2.train_fraction, derive_seed(cfg.seed, "split"));
        ws.clients = fed::make_clients(ws.data, ws.split);
    });
    return ws;
}

void check_ordering(const RunConfig& cfg, bool allow_unordered) {
    if (cfg.da.da_plus && !cfg.da.da_minus && !allow_unordered)
        throw ContractViolation(
            "da_plus requires da_minus: DA+ fine-tunes a model trained with DA-, so the reverse order is rejected "
            "(pass --allow-unordered to run it anyway)");
}

void run_stage1(Workspace& ws) {
    stage("stage1", [&] {
        const auto& c = ws.cfg;
        const auto train = truth_snapshots(ws.data, ws.split.train_t);
        const auto tc = rsu_train_config(c, c.stage1.epochs, c.stage1.batch_size, c.stage1.lr, c.stage1.weight_decay, 0.0);
        auto r = rsu::train_stage1(train, rsu_config(c), tc, derive_seed(c.seed, "stage1"));
        add_trace(ws, "stage1", r.trace);
        const auto test = truth_snapshots(ws.data, ws.split.test_t);
        add_metric(ws, "stage1", "train_sum_rate", r.trace.back().sum_rate);
        add_metric(ws, "stage1", "test_sum_rate_truth",
                   rsu::mean_sum_rate(test, r.params, tc.projection, c.scenario.sigma2));
        ws.rsu_stage1 = std::move(r.params);
    });
}

void run_stage2(Workspace& ws) {
    stage("stage2", [&] {
        const auto& c = ws.cfg;
        const auto vcfg = vehicle_config(c);
        Rng init = Rng::substream(c.seed, "stage2:vehicle:init");
        const auto initial = veh::init_vehicle_params(vcfg, air::ModalitySet::all(), init);
        const auto fl = fl_config(c);
        const auto seed = derive_seed(c.seed, "stage2");
        fed::FlResult r;
        ws.harmonious.clear();
        ws.phi.clear();
        if (c.da.da_minus) {
            if (!ws.rsu_stage1)
                throw std::runtime_error("DA- needs the stage-1 RSU model (run train-rsu first)");
            bal::DaMinus dm(ws.data, *ws.rsu_stage1, ws.clients, vcfg, fl, da_minus_config(c),
                            derive_seed(c.seed, "stage2:daminus"));
            r = fed::run_fl(ws.clients, initial, vcfg, fl, seed, dm.factory());
            for (std::size_t i = 0; i < ws.clients.size(); ++i)
                ws.harmonious.push_back(dm.harmonious(i));
            ws.phi = dm.log();
            const auto dev = dm.mean_deviation_by_epoch();
            if (!dev.empty()) {
                add_metric(ws, "da_minus", "phi_deviation_first_epoch", dev.front());
                add_metric(ws, "da_minus", "phi_deviation_last_epoch", dev.back());
            }
        } else {
            r = fed::run_fl(ws.clients, initial, vcfg, fl, seed);
        }
        ws.stage2_used_da_minus = c.da.da_minus;
        ws.rounds = r.history;
        add_accuracy(ws, "stage2", r.global);
        add_metric(ws, "stage2", "bytes_up", static_cast<double>(r.bytes_up));
        add_metric(ws, "stage2", "bytes_down", static_cast<double>(r.bytes_down));
        const auto rep = bal::imbalance_report(ws.clients);
        add_metric(ws, "imbalance", "zeta", rep.zeta);
        for (int q = 0; q < air::kModalities; ++q)
            add_metric(ws, "imbalance", std::string("kappa_") + air::kModalityLetters[q], rep.kappa.global[q]);
        ws.vehicle_stage2 = r.global;
        ws.vehicle_final = std::move(r.global);
    });
}

void run_da_plus(Workspace& ws, bool allow_unordered) {
    const auto& c = ws.cfg;
    if (!ws.stage2_used_da_minus && !allow_unordered)
        throw ContractViolation(
            "DA+ must follow a stage-2 run trained with DA- (pass --allow-unordered to run it anyway)");
    stage("da_plus", [&] {
        if (!ws.vehicle_stage2 || !ws.rsu_stage1)
            throw std::runtime_error("DA+ needs the stage-1 RSU and stage-2 vehicle models");
        const auto vcfg = vehicle_config(c);
        const auto cfg = da_plus_config(c);
        bal::DaPlusReport report;
        const auto mixed = bal::augment_clients(ws.clients, ws.data, *ws.vehicle_stage2, vcfg, *ws.rsu_stage1,
                                                projection(c), c.scenario.sigma2, cfg, derive_seed(c.seed, "daplus"),
                                                &report);
        auto r = bal::da_plus_finetune(mixed, *ws.vehicle_stage2, vcfg, cfg.finetune,
                                       derive_seed(c.seed, "daplus:finetune"));
        std::erase_if(ws.rounds, [&](const fed::RoundRecord& rr) { return rr.round > c.stage2.rounds; });
        for (auto rr : r.history) {
            rr.round += c.stage2.rounds;
            ws.rounds.push_back(rr);
        }
        add_metric(ws, "da_plus", "zeta_before", report.zeta_before);
        add_metric(ws, "da_plus", "zeta_after", report.zeta_after);
        add_metric(ws, "da_plus", "synthetic_samples", static_cast<double>(report.synthetic_samples));
        add_accuracy(ws, "da_plus", r.global);
        ws.vehicle_final = std::move(r.global);
    });
}

void run_stage3(Workspace& ws) {
    stage("stage3", [&] {
        const auto& c = ws.cfg;
        if (!ws.rsu_stage1 || !ws.vehicle_final)
            throw std::runtime_error("stage 3 needs the stage-1 RSU model and a trained vehicle model");
        const auto predicted = predicted_snapshots(ws, *ws.vehicle_final, ws.split.train_t);
        const auto truth = truth_snapshots(ws.data, ws.split.train_t);
        const auto tc = rsu_train_config(c, c.stage3.epochs, c.stage3.batch_size, c.stage3.lr, c.stage3.weight_decay,
                                         c.perturbation.p_error);
        auto r = rsu::retrain_stage3(predicted, truth, *ws.rsu_stage1, tc, derive_seed(c.seed, "stage3"));
        add_trace(ws, "stage3", r.trace);
        add_metric(ws, "stage3", "train_sum_rate", r.trace.back().sum_rate);
        ws.rsu_stage3 = std::move(r.params);
    });
}

void run_eval(Workspace& ws) {
    stage("eval", [&] {
        const auto& c = ws.cfg;
        if (!ws.vehicle_final || !(ws.rsu_stage3 || ws.rsu_stage1))
            throw std::runtime_error("evaluation needs a vehicle model and an RSU model");
        ParameterStore rsu_params = ws.rsu_stage3 ? *ws.rsu_stage3 : *ws.rsu_stage1;
        const auto timing = timing_for(c);
        std::vector<air::ModalitySet> sets;
        for (const auto& cl : ws.clients)
            sets.push_back(cl.set);
        fed::EvalConfig ec{.projection = projection(c),
                           .sigma2 = c.scenario.sigma2,
                           .t_delay = timing.t_delay_gba,
                           .t_coher = timing.t_coher,
                           .ground_truth = false};
        const auto vcfg = vehicle_config(c);
        const auto m = fed::evaluate(ws.data, sets, ws.split.test_t, *ws.vehicle_final, vcfg, rsu_params, ec);
        add_metric(ws, "eval", "rsu_model_stage", ws.rsu_stage3 ? 3.0 : 1.0);
        add_metric(ws, "eval", "sum_rate", m.sum_rate);
        add_metric(ws, "eval", "effective_rate", m.effective_rate);
        add_metric(ws, "eval", "exact", m.exact);
        add_metric(ws, "eval", "f1", m.f1);
        ec.ground_truth = true;
        const auto g = fed::evaluate(ws.data, sets, ws.split.test_t, *ws.vehicle_final, vcfg, rsu_params, ec);
        add_metric(ws, "eval_truth", "sum_rate", g.sum_rate);
        add_metric(ws, "eval_truth", "effective_rate", g.effective_rate);
        add_metric(ws, "eval", "t_coher_s", timing.t_coher);
        add_metric(ws, "eval", "t_delay_s", timing.t_delay_gba);
    });
}

void run_baselines(Workspace& ws) {
    stage("baselines", [&] {
        const auto& c = ws.cfg;
        const auto timing = timing_for(c);
        const auto& d = ws.data;
        const int K = d.vehicles();
        BaselineRow wm{"WMMSE w/ channel estimation"}, zf{"ZF w/ beam sweeping"}, orc{"exhaustive oracle"};
        for (int t : ws.split.test_t) {
            const auto h = d.channels_at(t);
            std::vector<std::vector<double>> rss_all;
            for (int k = 0; k < K; ++k)
                rss_all.push_back(d.streams[k][t].rss);
            if (c.baselines.wmmse) {
                air::ChannelSet h_est(c.scenario.n_t, K);
                for (int k = 0; k < K; ++k)
                    h_est.col(k) = base::rss_channel_estimate(rss_all[k], d.codebook, c.baselines.rss_paths);
                const auto sol = base::wmmse(h_est, c.scenario.p_max, c.scenario.sigma2, c.baselines.wmmse_iters);
                const double r = air::sum_rate_precoded(h, sol.transmit(), c.scenario.sigma2).total;
                wm.sum_rate += r;
                wm.effective_rate += air::effective_sum_rate(r, timing.t_delay_wmmse, timing.t_coher);
                ++wm.snapshots;
            }
            if (c.baselines.zf_sweep) {
                const auto s = base::zf_sweep(rss_all, c.scenario.w, c.scenario.p_max);
                const double r = air::sum_rate(h, d.codebook, s, c.scenario.sigma2).total;
                zf.sum_rate += r;
                zf.effective_rate += air::effective_sum_rate(r, timing.t_delay_sweep, timing.t_coher);
                ++zf.snapshots;
            }
            if (c.baselines.oracle) {
                const double r = base::exhaustive_oracle(h, d.codebook, c.scenario.p_max, c.scenario.sigma2).total;
                orc.sum_rate += r;
                orc.effective_rate += r;  // upper bound: alignment treated as free
                ++orc.snapshots;
            }
        }
        ws.baselines.clear();
        for (auto* row : {&wm, &zf, &orc}) {
            if (row->snapshots == 0)
                continue;
            row->sum_rate /= row->snapshots;
            row->effective_rate /= row->snapshots;
            ws.baselines.push_back(*row);
        }
    });
}

void run_pipeline(Workspace& ws, bool allow_unordered) {
    check_ordering(ws.cfg, allow_unordered);
    run_stage1(ws);
    run_stage2(ws);
    if (ws.cfg.da.da_plus)
        run_da_plus(ws, true);
    run_stage3(ws);
    run_eval(ws);
    run_baselines(ws);
}

// ---------------------------------------------------------------------------
// Persistence

std::string version_string() { return std::string(kVersion) + " (" + BEAMGRAPH_GIT_DESCRIBE + ")"; }

void write_outputs(const Workspace& ws, const fs::path& dir, const std::string& command, double wall_seconds) {
    fs::create_directories(dir / "checkpoints");
    {
        auto os = open_out(dir / "config.json");
        os << ws.cfg.to_json_text() << '\n';
    }
    const auto metrics = merged_metrics(ws.metrics, dir / "metrics.csv");
    {
        auto os = open_out(dir / "metrics.csv");
        os << "# beamgraph metrics v1\n" << "stage,metric,value\n";
        for (const auto& m : metrics)
            os << csv_escape(m.stage) << ',' << csv_escape(m.name) << ',' << m.value << '\n';
    }
    const auto trace = merged_trace(ws.loss_trace, dir / "loss_trace.csv");
    if (!trace.empty()) {
        auto os = open_out(dir / "loss_trace.csv");
        os << "# beamgraph loss_trace v1\n" << "stage,epoch,loss,sum_rate\n";
        for (const auto& r : trace)
            os << r.stage << ',' << r.epoch << ',' << r.loss << ',' << r.sum_rate << '\n';
    }
    if (!ws.rounds.empty())
        fed::write_rounds_csv(dir / "rounds.csv", ws.rounds);
    if (!ws.phi.empty())
        bal::write_phi_csv(dir / "phi.csv", ws.phi);
    const auto table = air::overhead_table(ws.cfg.overhead);
    {
        auto os = open_out(dir / "overhead.csv");
        os << "# beamgraph overhead v1\n" << "scheme,bits,feedback_latency_s,delay_s,period_fraction\n";
        for (const auto& r : table)
            os << csv_escape(r.scheme) << ',' << r.bits << ',' << r.feedback_latency_s << ',' << r.delay_s << ','
               << r.period_fraction << '\n';
    }
    if (!ws.baselines.empty()) {
        auto os = open_out(dir / "baselines.csv");
        os << "# beamgraph baselines v1\n" << "scheme,sum_rate,effective_rate,snapshots\n";
        for (const auto& b : ws.baselines)
            os << csv_escape(b.scheme) << ',' << b.sum_rate << ',' << b.effective_rate << ',' << b.snapshots << '\n';
    }

    const auto ck = dir / "checkpoints";
    if (ws.rsu_stage1)
        tk::save_checkpoint(ck / "rsu_stage1.bgck", *ws.rsu_stage1);
    if (ws.rsu_stage3)
        tk::save_checkpoint(ck / "rsu_stage3.bgck", *ws.rsu_stage3);
    if (ws.vehicle_stage2)
        tk::save_checkpoint(ck / "vehicle_stage2.bgck", *ws.vehicle_stage2);
    if (ws.vehicle_final) {
        tk::save_checkpoint(ck / "vehicle_final.bgck", *ws.vehicle_final);
        const auto vcfg = vehicle_config(ws.cfg);
        for (const auto& cl : ws.clients)
            tk::save_checkpoint(ck / ("vehicle_client" + std::to_string(cl.id) + "_" + cl.set.str() + ".bgck"),
                                veh::prune_for(cl.set, *ws.vehicle_final, vcfg).params);
    }
    for (std::size_t i = 0; i < ws.harmonious.size(); ++i)
        tk::save_checkpoint(ck / ("harmonious_client" + std::to_string(ws.clients[i].id) + ".bgck"), ws.harmonious[i]);
    {
        auto os = open_out(ck / "state.json");
        os << json{{"stage2_da_minus", ws.stage2_used_da_minus}}.dump(2) << '\n';
    }

    json summary;
    summary["version"] = kVersion;
    summary["git_describe"] = BEAMGRAPH_GIT_DESCRIBE;
    summary["command"] = command;
    summary["seed"] = ws.cfg.seed;
    summary["config"] = json::parse(ws.cfg.to_json_text());
    json m = json::object();
    for (const auto& x : metrics)
        m[x.stage][x.name] = x.value;
    summary["metrics"] = m;
    summary["overhead"] = json::array();
    for (const auto& r : table)
        summary["overhead"].push_back({{"scheme", r.scheme},
                                       {"bits", r.bits},
                                       {"feedback_latency_s", r.feedback_latency_s},
                                       {"delay_s", r.delay_s},
                                       {"period_fraction", r.period_fraction}});
    summary["baselines"] = json::array();
    for (const auto& b : ws.baselines)
        summary["baselines"].push_back(
            {{"scheme", b.scheme}, {"sum_rate", b.sum_rate}, {"effective_rate", b.effective_rate}});
    summary["wall_clock_s"] = wall_seconds;
    auto os = open_out(dir / "summary.json");
    os << summary.dump(2) << '\n';
}

void load_checkpoints(Workspace& ws, const fs::path& dir) {
    const auto ck = dir / "checkpoints";
    auto load = [&](const char* name, std::optional<ParameterStore>& slot) {
        if (fs::exists(ck / name))
            slot = tk::load_checkpoint(ck / name);
    };
    load("rsu_stage1.bgck", ws.rsu_stage1);
    load("rsu_stage3.bgck", ws.rsu_stage3);
    load("vehicle_stage2.bgck", ws.vehicle_stage2);
    load("vehicle_final.bgck", ws.vehicle_final);
    ws.harmonious.clear();
    for (const auto& cl : ws.clients) {
        const auto p = ck / ("harmonious_client" + std::to_string(cl.id) + ".bgck");
        if (!fs::exists(p)) {
            ws.harmonious.clear();
            break;
        }
        ws.harmonious.push_back(tk::load_checkpoint(p));
    }
    if (fs::exists(ck / "state.json")) {
        std::ifstream is(ck / "state.json");
        try {
            ws.stage2_used_da_minus = json::parse(is).at("stage2_da_minus").get<bool>();
        } catch (const json::exception& e) {
            throw std::runtime_error("corrupt " + (ck / "state.json").string() + ": " + e.what());
        }
    }
}

}  // namespace beamgraph::cli

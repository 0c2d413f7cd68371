// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "CLI11.hpp"
#include "beamgraph/expcli.hpp"
#include "beamgraph/verify.hpp"

namespace beamgraph::cli {

namespace {

namespace fs = std::filesystem;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool allow_unordered = false;
    int trials = 0;
    std::string suite = "all";
};

RunConfig resolve(const Options& o) {
    RunConfig c = load_run_config(o.config);
    if (o.seed)
        c.seed = *o.seed;
    if (!o.out.empty())
        c.output_dir = o.out;
    return c;
}

void print_metrics(const Workspace& ws, std::ostream& out) {
    for (const auto& m : ws.metrics)
        out << "  " << m.stage << '.' << m.name << " = " << std::setprecision(6) << m.value << '\n';
    for (const auto& b : ws.baselines)
        out << "  baseline '" << b.scheme << "': sum rate " << b.sum_rate << ", effective " << b.effective_rate << '\n';
}

int verify_command(const Options& o, std::ostream& out) {
    const std::uint64_t seed = o.seed.value_or(0);
    const auto results = verify::run(o.suite, seed, o.trials, verify::thread_budget());
    bool ok = true;
    for (const auto& r : results) {
        out << verify::format(r) << '\n';
        ok = ok && r.pass;
    }
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        std::ofstream os(fs::path(o.out) / "verify.csv");
        os.precision(17);
        os << "# beamgraph verify v1\n" << "suite,pass,trials,failures,worst,tolerance,seconds\n";
        for (const auto& r : results)
            os << r.name << ',' << (r.pass ? 1 : 0) << ',' << r.trials << ',' << r.failures << ',' << r.worst << ','
               << r.tolerance << ',' << r.seconds << '\n';
    }
    return ok ? kOk : kVerification;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"beamgraph: multi-user beam alignment experiments"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", o.config, "Run configuration (JSON)");
        if (needs_config)
            c->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Master seed (overrides the config)");
        sub->add_option("--out", o.out, "Output directory (overrides the config)");
    };
    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"gen-scenario", "Generate the scenario and export the dataset"},
        {"train-rsu", "Stage 1: train the RSU policy on true feedback"},
        {"train-fl", "Stage 2: federated vehicle training (DA- when enabled)"},
        {"da-minus", "Stage 2 with modality dropping forced on"},
        {"da-plus", "Synthetic samples and decision-layer fine-tuning"},
        {"retrain-rsu", "Stage 3: retrain the RSU policy on predicted and true feedback"},
        {"eval", "End-to-end evaluation on the test timesteps"},
        {"baselines", "Overhead table and baseline rates"},
        {"pipeline", "All stages in order"},
    };
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        add_common(sub, true);
        if (std::string(cmd.name) == "da-plus" || std::string(cmd.name) == "pipeline")
            sub->add_flag("--allow-unordered", o.allow_unordered, "Allow DA+ without DA-");
    }
    auto* verify_sub = app.add_subcommand("verify", "Property and gradient checks");
    add_common(verify_sub, false);
    verify_sub->add_option("suite", o.suite, "prop1, prop2, prop3, grad, constraints or all")
        ->check(CLI::IsMember({"prop1", "prop2", "prop3", "grad", "constraints", "all"}));
    verify_sub->add_option("--trials", o.trials, "Trials per suite (0 keeps each suite's default)")
        ->check(CLI::NonNegativeNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidation;
    }

    const auto start = std::chrono::steady_clock::now();
    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (name == "verify")
            return verify_command(o, out);

        RunConfig cfg = resolve(o);
        if (name == "da-minus")
            cfg.da.da_minus = true;
        if (name == "pipeline")
            check_ordering(cfg, o.allow_unordered);
        Workspace ws = prepare(cfg);
        const fs::path dir = cfg.output_dir;
        if (name != "gen-scenario" && name != "train-rsu" && name != "pipeline" && name != "baselines")
            load_checkpoints(ws, dir);

        if (name == "gen-scenario") {
            fs::create_directories(dir);
            std::ofstream(dir / "scenario.json") << cfg.scenario.to_json_text() << '\n';
            air::export_dataset_csv(dir / "dataset.csv", ws.data);
        } else if (name == "train-rsu") {
            run_stage1(ws);
        } else if (name == "train-fl" || name == "da-minus") {
            run_stage2(ws);
        } else if (name == "da-plus") {
            run_da_plus(ws, o.allow_unordered);
        } else if (name == "retrain-rsu") {
            run_stage3(ws);
        } else if (name == "eval") {
            run_eval(ws);
        } else if (name == "baselines") {
            run_baselines(ws);
        } else if (name == "pipeline") {
            run_pipeline(ws, o.allow_unordered);
        }
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_outputs(ws, dir, name, wall);
        out << name << ": done in " << std::fixed << std::setprecision(2) << wall << " s, outputs in " << dir.string()
            << '\n'
            << std::defaultfloat;
        print_metrics(ws, out);
        return kOk;
    } catch (const StageError& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    } catch (const ContractViolation& e) {
        err << "invalid configuration: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    }
}

}  // namespace beamgraph::cli

// waicflow: simulate multispectral data, train flow ensembles, score spectra
// by WAIC and run the validation experiments.
//
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "waicflow/errors.hpp"
#include "waicflow/harness.hpp"

namespace {

using namespace waicflow;

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "waicflow_out";
    std::optional<std::size_t> members;
    bool serial = false;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config_path, "key = value configuration file");
    cmd->add_option("--seed", opts.seed, "base random seed");
    cmd->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    cmd->add_option("--members", opts.members, "ensemble size");
    cmd->add_flag("--serial", opts.serial, "single-threaded execution");
    cmd->add_option("--set", opts.overrides, "override one config key (key=value), repeatable");
}

Config resolve(const CommonOptions& opts) {
    Config c = opts.config_path.empty() ? Config{} : load_config(opts.config_path);
    for (const auto& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opts.seed) c.seed = *opts.seed;
    if (opts.members) c.members = *opts.members;
    if (opts.serial) c.threads = 1;
    c.validate();
    return c;
}

void write_config_copy(const Config& c, const std::string& out_dir) {
    Config copy = c;
    copy.threads = 0;
    std::filesystem::create_directories(out_dir);
    std::ofstream out(std::filesystem::path(out_dir) / "config_used.txt");
    out << copy.to_text();
}

std::string fixed(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << v;
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Out-of-distribution scoring of multispectral spectra with flow ensembles"};
    app.require_subcommand(1);

    CommonOptions opts;
    std::string dataset_path, manifest_path;

    auto* simulate = app.add_subcommand("simulate", "simulate a labelled dataset with a train/test split");
    add_common(simulate, opts);

    auto* train = app.add_subcommand("train", "train an ensemble on a dataset file");
    add_common(train, opts);
    train->add_option("dataset", dataset_path, "dataset file")->required();

    auto* score = app.add_subcommand("score", "score every row of a dataset by WAIC");
    add_common(score, opts);
    score->add_option("manifest", manifest_path, "ensemble manifest")->required();
    score->add_option("dataset", dataset_path, "dataset file")->required();

    auto* insilico = app.add_subcommand("exp-insilico", "superset experiment on simulated data");
    add_common(insilico, opts);
    auto* scene = app.add_subcommand("exp-scenechange", "illuminant switch in a synthetic frame stream");
    add_common(scene, opts);
    auto* sweep = app.add_subcommand("exp-sweep", "WAIC as a function of ensemble size");
    add_common(sweep, opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const Config config = resolve(opts);
        if (simulate->parsed()) {
            const auto r = cmd_simulate(config, opts.out_dir);
            write_config_copy(config, opts.out_dir);
            std::cout << "wrote " << r.dataset_path << ": " << r.train_rows << " train, " << r.test_rows
                      << " test rows\n";
        } else if (train->parsed()) {
            const auto r = cmd_train(config, dataset_path, opts.out_dir);
            write_config_copy(config, opts.out_dir);
            std::cout << "wrote " << r.manifest_path << ": " << r.members << " members trained on " << r.train_rows
                      << " rows\n";
        } else if (score->parsed()) {
            const auto path = cmd_score(config, manifest_path, dataset_path, opts.out_dir);
            std::cout << "wrote " << path << '\n';
        } else if (insilico->parsed()) {
            const auto r = run_insilico_experiment(config, opts.out_dir, &std::cerr);
            write_config_copy(config, opts.out_dir);
            std::cout << "median gap " << fixed(r.median_gap) << ", AUROC " << fixed(r.auroc) << ", worst 2% outside "
                      << fixed(r.worst2_outside_fraction) << '\n';
        } else if (scene->parsed()) {
            const auto r = run_scene_change_experiment(config, opts.out_dir, &std::cerr);
            write_config_copy(config, opts.out_dir);
            std::cout << "detected change at frame "
                      << (r.detected ? std::to_string(*r.detected) : std::string("none")) << " (switch "
                      << r.true_switch << ")\n";
        } else if (sweep->parsed()) {
            const auto r = run_ensemble_sweep(config, opts.out_dir, &std::cerr);
            write_config_copy(config, opts.out_dir);
            std::cout << "wrote " << r.rows.size() << " ensemble sizes to " << r.files.front() << '\n';
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

#pragma once

// Experiment orchestration behind the command-line tool. Every function
// writes comma-separated tables and a plain-text report into an output
// directory. Nothing time-dependent is written, so reruns with the same
// configuration produce identical files.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "waicflow/datasets.hpp"
#include "waicflow/simulator.hpp"
#include "waicflow/waic.hpp"

namespace waicflow {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "Config stores counts as 64-bit values");

struct Config {
    std::uint64_t seed = 42;
    std::size_t members = 5;
    /// Worker threads; 0 picks the hardware concurrency. Not part of the hash
    /// because results do not depend on it.
    std::size_t threads = 0;

    // Data
    std::size_t n_samples = 55000;
    std::string camera = "spectrocam8";
    std::string illuminant = "xenon";
    double noise_sigma = 0.0;
    double train_ratio = kDefaultTrainFraction;

    // Flow and optimizer
    std::size_t n_blocks = 10;
    std::size_t hidden_width = 64;
    double clamp_alpha = 2.0;
    std::size_t epochs = 30;
    std::size_t batch_size = 256;
    double learning_rate = 1e-3;
    double lr_decay = 0.5;

    // Superset experiment
    std::string superset_rule = "pc1";  // pc1 | s1
    double superset_quantile = 0.85;    // pc1 rule only
    double tr_s_fraction = 0.49;
    std::size_t outlier_rays = 50;

    // Scene-change experiment
    std::string scene_camera = "ximea16";
    std::string scene_train_illuminant = "led";
    std::string scene_other_illuminant = "xenon";
    double scene_noise_sigma = 0.01;
    std::size_t scene_train_rows = 20000;
    std::size_t frames = 200;
    std::size_t switch_frame = 80;
    std::size_t frame_size = 32;
    std::size_t roi_size = 16;
    std::size_t rolling_window = 5;

    // Ensemble-size sweep
    std::size_t sweep_members = 20;
    std::size_t sweep_train_rows = 10000;
    std::size_t sweep_test_rows = 2000;
    double extra_absorber_min = 3.0;
    double extra_absorber_max = 10.0;

    /// Sets one field from its textual value; UsageError on unknown keys or
    /// unparsable values.
    void set(const std::string& key, const std::string& value);
    /// Range checks; UsageError naming the offending key.
    void validate() const;
    /// Canonical "key = value" listing of every field, in declaration order.
    std::string to_text() const;
    /// FNV-1a of to_text() without `threads`.
    std::string hash() const;

    TrainConfig train_config() const;
    std::size_t resolved_threads() const;

    // Counts and seeds share one alternative; std::size_t is 64-bit here.
    using FieldRef = std::variant<std::uint64_t*, double*, std::string*>;
    struct Field {
        const char* name;
        FieldRef ref;
    };
    std::vector<Field> fields();
};

/// Line-oriented "key = value" text; '#' starts a comment.
Config parse_config(std::istream& in);
Config load_config(const std::string& path);

// ---------------------------------------------------------------------------
// Commands

struct SimulateResult {
    std::string dataset_path;
    std::size_t train_rows = 0;
    std::size_t test_rows = 0;
};

/// Simulates n_samples rows, tags them train/test and writes dataset.csv.
SimulateResult cmd_simulate(const Config& config, const std::string& out_dir);

struct TrainResult {
    std::string manifest_path;
    std::size_t members = 0;
    std::size_t train_rows = 0;
};

/// Trains `members` flows on the rows tagged train (or tr_s); if the file
/// has neither tag every row is used. Writes manifest.txt, member
/// checkpoints and loss_curves.csv.
TrainResult cmd_train(const Config& config, const std::string& dataset_path, const std::string& out_dir);

/// Writes scores.csv: row, per-member logp, mean, var, waic.
std::string cmd_score(const Config& config, const std::string& manifest_path, const std::string& dataset_path,
                      const std::string& out_dir);

// ---------------------------------------------------------------------------
// Analysis helpers

/// Probability that a random positive scores above a random negative,
/// ties counted as one half. Computed from mid-ranks.
double auroc(std::span<const double> positives, std::span<const double> negatives);

struct ScoreSummary {
    std::string name;
    std::size_t count = 0;
    double mean = 0.0;
    double median = 0.0;
    double map = 0.0;  // KDE mode
    double q02 = 0.0;
    double q25 = 0.0;
    double q75 = 0.0;
    double q98 = 0.0;
};

ScoreSummary summarize_scores(const std::string& name, std::span<const double> values);

/// Centered rolling mean; the window is truncated at the series ends.
std::vector<double> rolling_mean(std::span<const double> series, std::size_t window);

/// First index where the rolling mean lies on the other side of the
/// midpoint between the medians of series[0, split) and series[split, end)
/// than at index 0. nullopt if it never crosses.
std::optional<std::size_t> detect_changepoint(std::span<const double> series, std::size_t split, std::size_t window);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentReport {
    std::vector<ScoreSummary> summaries;  // tr_s, sup, sup_r, sup_outside
    double auroc = 0.0;                   // WAIC, outside cluster vs in-support sup rows
    double auroc_mean_logp = 0.0;         // same split scored by -mean logp
    double median_gap = 0.0;              // |median(sup_r) - median(tr_s)|
    double worst2_outside_fraction = 0.0;
    double best2_outside_fraction = 0.0;
    double outlier_ray_fraction = 0.0;    // far rays scoring above median(tr_s)
    std::size_t tr_s_rows = 0;
    std::size_t train_rows = 0;
    std::vector<std::string> files;
};

ExperimentReport run_insilico_experiment(const Config& config, const std::string& out_dir,
                                         std::ostream* log = nullptr);

/// Fraction of `rays` points x = mean + 5 * rms_radius * u (u uniform on the
/// unit sphere) whose WAIC exceeds `threshold`.
double outlier_ray_fraction(const Ensemble& ensemble, const Matrix& train, std::size_t rays, double threshold,
                            Rng& rng, std::size_t threads = 1);

struct SceneChangeSeries {
    std::vector<double> roi_mean_waic;  // one per frame
    std::vector<double> rolling;
    std::optional<std::size_t> detected;
    std::size_t true_switch = 0;
    double mismatched_mean = 0.0;  // frames before the switch
    double matched_mean = 0.0;     // frames from switch + 10 on
    std::vector<std::string> files;
};

SceneChangeSeries run_scene_change_experiment(const Config& config, const std::string& out_dir,
                                              std::ostream* log = nullptr);

struct SweepRow {
    std::size_t members = 0;
    double mean_in = 0.0;
    double mean_out = 0.0;
    double median_in = 0.0;
    double median_out = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // m = 2 .. sweep_members
    std::vector<std::string> files;
};

SweepResult run_ensemble_sweep(const Config& config, const std::string& out_dir, std::ostream* log = nullptr);

}  // namespace waicflow

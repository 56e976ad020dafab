#include "waicflow/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "waicflow/checkpoint.hpp"
#include "waicflow/errors.hpp"

namespace waicflow {

namespace {

namespace fs = std::filesystem;

// Independent random streams derived from the configured seed.
constexpr std::uint64_t kSimulateStream = 1;
constexpr std::uint64_t kSplitStream = 2;
constexpr std::uint64_t kSupersetStream = 3;
constexpr std::uint64_t kEnsembleStream = 4;
constexpr std::uint64_t kRayStream = 5;
constexpr std::uint64_t kSceneTrainStream = 11;
constexpr std::uint64_t kSceneEnsembleStream = 12;
constexpr std::uint64_t kSceneFieldStream = 13;
constexpr std::uint64_t kSceneNoiseStream = 14;
constexpr std::uint64_t kSweepTrainStream = 21;
constexpr std::uint64_t kSweepInStream = 22;
constexpr std::uint64_t kSweepOutStream = 23;
constexpr std::uint64_t kSweepEnsembleStream = 24;

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::string prepare_dir(const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw UsageError("cannot create output directory '" + out_dir + "'");
    return out_dir;
}

std::string join(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write failed for '" + path + "'");
}

void note(std::ostream* log, const std::string& msg) {
    if (log) *log << msg << '\n' << std::flush;
}

std::string fmt(double v) { return format_double(v); }

std::string fixed(double v, int digits = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

std::vector<double> waic_values(const std::vector<WaicScore>& scores) {
    std::vector<double> out;
    out.reserve(scores.size());
    for (const auto& s : scores) out.push_back(s.waic);
    return out;
}

double mean_of(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string summary_table(const std::vector<ScoreSummary>& summaries) {
    std::ostringstream os;
    os << "split,count,mean,median,map,q02,q25,q75,q98\n";
    for (const auto& s : summaries) {
        os << s.name << ',' << s.count << ',' << fmt(s.mean) << ',' << fmt(s.median) << ',' << fmt(s.map) << ','
           << fmt(s.q02) << ',' << fmt(s.q25) << ',' << fmt(s.q75) << ',' << fmt(s.q98) << '\n';
    }
    return os.str();
}

std::string loss_curve_table(const Ensemble& ensemble) {
    std::ostringstream os;
    os << "member,seed,epoch,mean_nll\n";
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const auto& m = ensemble.members()[i];
        for (std::size_t e = 0; e < m.loss_curve().size(); ++e) {
            os << i << ',' << m.seed() << ',' << e << ',' << fmt(m.loss_curve()[e]) << '\n';
        }
    }
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::vector<Config::Field> Config::fields() {
    return {
        {"seed", &seed},
        {"members", &members},
        {"threads", &threads},
        {"n_samples", &n_samples},
        {"camera", &camera},
        {"illuminant", &illuminant},
        {"noise_sigma", &noise_sigma},
        {"train_ratio", &train_ratio},
        {"n_blocks", &n_blocks},
        {"hidden_width", &hidden_width},
        {"clamp_alpha", &clamp_alpha},
        {"epochs", &epochs},
        {"batch_size", &batch_size},
        {"learning_rate", &learning_rate},
        {"lr_decay", &lr_decay},
        {"superset_rule", &superset_rule},
        {"superset_quantile", &superset_quantile},
        {"tr_s_fraction", &tr_s_fraction},
        {"outlier_rays", &outlier_rays},
        {"scene_camera", &scene_camera},
        {"scene_train_illuminant", &scene_train_illuminant},
        {"scene_other_illuminant", &scene_other_illuminant},
        {"scene_noise_sigma", &scene_noise_sigma},
        {"scene_train_rows", &scene_train_rows},
        {"frames", &frames},
        {"switch_frame", &switch_frame},
        {"frame_size", &frame_size},
        {"roi_size", &roi_size},
        {"rolling_window", &rolling_window},
        {"sweep_members", &sweep_members},
        {"sweep_train_rows", &sweep_train_rows},
        {"sweep_test_rows", &sweep_test_rows},
        {"extra_absorber_min", &extra_absorber_min},
        {"extra_absorber_max", &extra_absorber_max},
    };
}

void Config::set(const std::string& key, const std::string& value) {
    for (auto& f : fields()) {
        if (key != f.name) continue;
        const auto bad = [&] { return UsageError("config key '" + key + "': cannot parse '" + value + "'"); };
        std::visit(
            [&](auto* ptr) {
                using T = std::remove_pointer_t<decltype(ptr)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    if (value.empty()) throw bad();
                    *ptr = value;
                } else if constexpr (std::is_same_v<T, double>) {
                    const auto v = parse_double(value);
                    if (!v || !std::isfinite(*v)) throw bad();
                    *ptr = *v;
                } else {
                    if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) throw bad();
                    try {
                        *ptr = static_cast<T>(std::stoull(value));
                    } catch (const std::exception&) {
                        throw bad();
                    }
                }
            },
            f.ref);
        return;
    }
    throw UsageError("unknown config key '" + key + "'");
}

void Config::validate() const {
    auto require = [](bool ok, const char* key, const char* what) {
        if (!ok) throw UsageError(std::string("config key '") + key + "' " + what);
    };
    require(members >= 2, "members", "must be >= 2");
    require(n_samples >= 2, "n_samples", "must be >= 2");
    parse_camera_kind(camera);
    parse_illuminant(illuminant);
    require(noise_sigma >= 0.0, "noise_sigma", "must be >= 0");
    require(train_ratio > 0.0 && train_ratio < 1.0, "train_ratio", "must be in (0, 1)");
    require(n_blocks >= 1, "n_blocks", "must be >= 1");
    require(hidden_width >= 1, "hidden_width", "must be >= 1");
    require(clamp_alpha > 0.0, "clamp_alpha", "must be > 0");
    require(epochs >= 1, "epochs", "must be >= 1");
    require(batch_size >= 1, "batch_size", "must be >= 1");
    require(learning_rate > 0.0, "learning_rate", "must be > 0");
    require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay", "must be in (0, 1]");
    require(superset_rule == "pc1" || superset_rule == "s1", "superset_rule", "must be pc1 or s1");
    require(superset_quantile > 0.0 && superset_quantile < 1.0, "superset_quantile", "must be in (0, 1)");
    require(tr_s_fraction > 0.0 && tr_s_fraction < 1.0, "tr_s_fraction", "must be in (0, 1)");
    parse_camera_kind(scene_camera);
    parse_illuminant(scene_train_illuminant);
    parse_illuminant(scene_other_illuminant);
    require(scene_train_illuminant != scene_other_illuminant, "scene_other_illuminant",
            "must differ from scene_train_illuminant");
    require(scene_noise_sigma >= 0.0, "scene_noise_sigma", "must be >= 0");
    require(scene_train_rows >= 2, "scene_train_rows", "must be >= 2");
    require(frames >= 2, "frames", "must be >= 2");
    require(switch_frame >= 1 && switch_frame < frames, "switch_frame", "must be in [1, frames)");
    require(frame_size >= 1, "frame_size", "must be >= 1");
    require(roi_size >= 1 && roi_size <= frame_size, "roi_size", "must be in [1, frame_size]");
    require(rolling_window >= 1, "rolling_window", "must be >= 1");
    require(sweep_members >= 2, "sweep_members", "must be >= 2");
    require(sweep_train_rows >= 2, "sweep_train_rows", "must be >= 2");
    require(sweep_test_rows >= 1, "sweep_test_rows", "must be >= 1");
    require(extra_absorber_min >= 0.0 && extra_absorber_min <= extra_absorber_max, "extra_absorber_min",
            "must be in [0, extra_absorber_max]");
}

std::string Config::to_text() const {
    std::ostringstream os;
    for (const auto& f : const_cast<Config*>(this)->fields()) {
        os << f.name << " = ";
        std::visit(
            [&](auto* ptr) {
                using T = std::remove_pointer_t<decltype(ptr)>;
                if constexpr (std::is_same_v<T, double>) {
                    os << format_double(*ptr);
                } else {
                    os << *ptr;
                }
            },
            f.ref);
        os << '\n';
    }
    return os.str();
}

std::string Config::hash() const {
    Config copy = *this;
    copy.threads = 0;
    return fnv1a_hex(copy.to_text());
}

TrainConfig Config::train_config() const {
    TrainConfig t;
    t.arch.n_blocks = n_blocks;
    t.arch.hidden_width = hidden_width;
    t.arch.clamp_alpha = clamp_alpha;
    t.batch_size = batch_size;
    t.epochs = epochs;
    t.adam.learning_rate = learning_rate;
    t.lr_decay = lr_decay;
    return t;
}

std::size_t Config::resolved_threads() const {
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
}

Config parse_config(std::istream& in) {
    Config c;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const UsageError& e) {
            throw UsageError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config '" + path + "'");
    return parse_config(in);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

Dataset simulate_configured(const Config& config) {
    const auto camera = make_camera(parse_camera_kind(config.camera), parse_illuminant(config.illuminant));
    SimulationOptions opts;
    opts.noise_sigma = config.noise_sigma;
    auto data = simulate_dataset(config.n_samples, camera, mix_seed(config.seed, kSimulateStream), opts);
    data.meta.seed = config.seed;
    data.meta.config_hash = config.hash();
    return data;
}

}  // namespace

SimulateResult cmd_simulate(const Config& config, const std::string& out_dir) {
    config.validate();
    prepare_dir(out_dir);
    const auto data = simulate_configured(config);
    Rng rng(mix_seed(config.seed, kSplitStream));
    auto [train, test] = split_train_test(data, config.train_ratio, rng);

    Dataset all;
    all.measurements = Matrix(data.size(), data.dim());
    all.labels = Matrix(data.size(), kTissueParamCount);
    all.meta = data.meta;
    std::size_t r = 0;
    for (const Dataset* part : {&train, &test}) {
        for (std::size_t i = 0; i < part->size(); ++i, ++r) {
            std::copy(part->measurements.row(i).begin(), part->measurements.row(i).end(),
                      all.measurements.row(r).begin());
            std::copy(part->labels->row(i).begin(), part->labels->row(i).end(), all.labels->row(r).begin());
            all.tags.push_back(part->tags[i]);
        }
    }
    SimulateResult result{join(out_dir, "dataset.csv"), train.size(), test.size()};
    save_dataset(all, result.dataset_path);
    return result;
}

TrainResult cmd_train(const Config& config, const std::string& dataset_path, const std::string& out_dir) {
    config.validate();
    const auto data = load_dataset(dataset_path);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.tags[i] == SplitTag::train || data.tags[i] == SplitTag::tr_s) rows.push_back(i);
    }
    if (rows.empty()) {
        rows.resize(data.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    if (rows.empty()) throw UsageError("dataset '" + dataset_path + "' has no rows to train on");
    const Matrix train = data.measurements.select_rows(rows);

    prepare_dir(out_dir);
    const auto ensemble = train_ensemble(config.train_config(), train, mix_seed(config.seed, kEnsembleStream),
                                         config.members, config.resolved_threads());
    TrainResult result{join(out_dir, "manifest.txt"), ensemble.size(), train.rows()};
    save_ensemble(ensemble, result.manifest_path, config.hash());
    write_file(join(out_dir, "loss_curves.csv"), loss_curve_table(ensemble));
    return result;
}

std::string cmd_score(const Config& config, const std::string& manifest_path, const std::string& dataset_path,
                      const std::string& out_dir) {
    const auto ensemble = load_ensemble(manifest_path);
    const auto data = load_dataset(dataset_path);
    if (data.size() == 0) throw UsageError("dataset '" + dataset_path + "' has no rows");
    if (data.dim() != ensemble.input_dim()) {
        throw UsageError("dataset has " + std::to_string(data.dim()) + " bands but the ensemble expects " +
                         std::to_string(ensemble.input_dim()));
    }
    const auto scores = waic_batch(ensemble, data.measurements, config.resolved_threads());

    std::ostringstream os;
    os << "row";
    for (std::size_t m = 0; m < ensemble.size(); ++m) os << ",logp_" << m;
    os << ",mean,var,waic\n";
    for (std::size_t i = 0; i < scores.size(); ++i) {
        os << i;
        for (double lp : scores[i].per_member_logp) os << ',' << fmt(lp);
        os << ',' << fmt(scores[i].mean_logp) << ',' << fmt(scores[i].var_logp) << ',' << fmt(scores[i].waic) << '\n';
    }
    prepare_dir(out_dir);
    const auto path = join(out_dir, "scores.csv");
    write_file(path, os.str());
    return path;
}

// ---------------------------------------------------------------------------
// Analysis helpers

double auroc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) throw UsageError("auroc needs both positive and negative scores");
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> items;
    items.reserve(positives.size() + negatives.size());
    for (double v : positives) items.push_back({v, true});
    for (double v : negatives) items.push_back({v, false});
    for (const auto& it : items) {
        if (std::isnan(it.score)) throw DomainError("auroc: NaN score");
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < items.size()) {
        std::size_t j = i;
        while (j < items.size() && items[j].score == items[i].score) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (items[k].positive) rank_sum += mid_rank;
        }
        i = j;
    }
    const auto np = static_cast<double>(positives.size());
    const auto nn = static_cast<double>(negatives.size());
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

ScoreSummary summarize_scores(const std::string& name, std::span<const double> values) {
    if (values.empty()) throw UsageError("cannot summarize an empty score set '" + name + "'");
    std::vector<double> v(values.begin(), values.end());
    ScoreSummary s;
    s.name = name;
    s.count = v.size();
    s.mean = mean_of(v);
    s.median = median(v);
    s.map = v.size() >= 10 ? kde_mode(v) : s.median;
    s.q02 = quantile(v, 0.02);
    s.q25 = quantile(v, 0.25);
    s.q75 = quantile(v, 0.75);
    s.q98 = quantile(v, 0.98);
    return s;
}

std::vector<double> rolling_mean(std::span<const double> series, std::size_t window) {
    if (window == 0) throw UsageError("rolling window must be >= 1");
    const std::size_t before = (window - 1) / 2;
    const std::size_t after = window - 1 - before;
    std::vector<double> out(series.size());
    for (std::size_t i = 0; i < series.size(); ++i) {
        const std::size_t lo = i >= before ? i - before : 0;
        const std::size_t hi = std::min(series.size(), i + after + 1);
        out[i] = mean_of(series.subspan(lo, hi - lo));
    }
    return out;
}

std::optional<std::size_t> detect_changepoint(std::span<const double> series, std::size_t split, std::size_t window) {
    if (split == 0 || split >= series.size()) throw UsageError("changepoint split must lie inside the series");
    const double left = median(std::vector<double>(series.begin(), series.begin() + static_cast<long>(split)));
    const double right = median(std::vector<double>(series.begin() + static_cast<long>(split), series.end()));
    const double mid = 0.5 * (left + right);
    const auto smooth = rolling_mean(series, window);
    const bool start_above = smooth[0] > mid;
    for (std::size_t i = 1; i < smooth.size(); ++i) {
        if ((smooth[i] > mid) != start_above) return i;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// In-silico superset experiment

double outlier_ray_fraction(const Ensemble& ensemble, const Matrix& train, std::size_t rays, double threshold,
                            Rng& rng, std::size_t threads) {
    if (rays == 0) throw UsageError("need at least one ray");
    if (train.rows() == 0) throw UsageError("outlier rays need training rows");
    const std::size_t d = train.cols();
    Vector mean(d, 0.0);
    for (std::size_t r = 0; r < train.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) mean[c] += train(r, c);
    }
    for (double& v : mean) v /= static_cast<double>(train.rows());
    double ss = 0.0;
    for (std::size_t r = 0; r < train.rows(); ++r) {
        for (std::size_t c = 0; c < d; ++c) ss += (train(r, c) - mean[c]) * (train(r, c) - mean[c]);
    }
    const double radius = std::sqrt(ss / static_cast<double>(train.rows()));

    Matrix points(rays, d);
    for (std::size_t k = 0; k < rays; ++k) {
        Vector u(d);
        double norm = 0.0;
        while (norm == 0.0) {
            norm = 0.0;
            for (double& v : u) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
        }
        for (std::size_t c = 0; c < d; ++c) points(k, c) = mean[c] + 5.0 * radius * u[c] / norm;
    }
    const auto scores = waic_batch(ensemble, points, threads);
    std::size_t above = 0;
    for (const auto& s : scores) above += s.waic > threshold ? 1 : 0;
    return static_cast<double>(above) / static_cast<double>(rays);
}

ExperimentReport run_insilico_experiment(const Config& config, const std::string& out_dir, std::ostream* log) {
    config.validate();
    prepare_dir(out_dir);
    const std::size_t threads = config.resolved_threads();

    note(log, "simulating " + std::to_string(config.n_samples) + " spectra (" + config.camera + ", " +
                  config.illuminant + ")");
    const auto data = simulate_configured(config);
    Rng split_rng(mix_seed(config.seed, kSplitStream));
    const auto [train, test] = split_train_test(data, config.train_ratio, split_rng);

    SupersetOptions opts;
    if (config.superset_rule == "s1") {
        opts = label_superset_options();
    } else {
        opts.threshold = config.superset_quantile;
    }
    opts.tr_s_fraction = config.tr_s_fraction;
    Rng superset_rng(mix_seed(config.seed, kSupersetStream));
    const auto split = superset_split(train, opts, superset_rng);

    note(log, "training " + std::to_string(config.members) + " flows on " + std::to_string(split.tr_s.size()) +
                  " tr_s rows");
    const auto ensemble = train_ensemble(config.train_config(), split.tr_s.measurements,
                                         mix_seed(config.seed, kEnsembleStream), config.members, threads);

    note(log, "scoring tr_s and sup");
    const auto tr_s_scores = waic_batch(ensemble, split.tr_s.measurements, threads);
    const auto sup_scores = waic_batch(ensemble, split.sup.measurements, threads);
    const auto tr_s_waic = waic_values(tr_s_scores);
    const auto sup_waic = waic_values(sup_scores);

    std::vector<double> sup_r_waic, outside_waic, inside_neg_logp, outside_neg_logp;
    for (std::size_t i = 0; i < sup_scores.size(); ++i) {
        if (split.sup_outside[i]) {
            outside_waic.push_back(sup_waic[i]);
            outside_neg_logp.push_back(-sup_scores[i].mean_logp);
        } else {
            sup_r_waic.push_back(sup_waic[i]);
            inside_neg_logp.push_back(-sup_scores[i].mean_logp);
        }
    }

    ExperimentReport report;
    report.train_rows = train.size();
    report.tr_s_rows = split.tr_s.size();
    report.summaries = {summarize_scores("tr_s", tr_s_waic), summarize_scores("sup", sup_waic),
                        summarize_scores("sup_r", sup_r_waic), summarize_scores("sup_outside", outside_waic)};
    report.median_gap = std::abs(report.summaries[2].median - report.summaries[0].median);
    report.auroc = auroc(outside_waic, sup_r_waic);
    report.auroc_mean_logp = auroc(outside_neg_logp, inside_neg_logp);

    // Best / worst 2% of the superset by WAIC.
    const std::size_t n_sup = sup_waic.size();
    const std::size_t tail = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.02 * n_sup)));
    std::vector<std::size_t> order(n_sup);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sup_waic[a] < sup_waic[b]; });
    std::vector<int> flag(n_sup, 0);
    std::size_t best_out = 0, worst_out = 0;
    for (std::size_t k = 0; k < tail; ++k) {
        flag[order[k]] = -1;
        best_out += split.sup_outside[order[k]] ? 1 : 0;
        flag[order[n_sup - 1 - k]] = 1;
        worst_out += split.sup_outside[order[n_sup - 1 - k]] ? 1 : 0;
    }
    report.best2_outside_fraction = static_cast<double>(best_out) / static_cast<double>(tail);
    report.worst2_outside_fraction = static_cast<double>(worst_out) / static_cast<double>(tail);

    Rng ray_rng(mix_seed(config.seed, kRayStream));
    report.outlier_ray_fraction = outlier_ray_fraction(ensemble, split.tr_s.measurements, config.outlier_rays,
                                                       report.summaries[0].median, ray_rng, threads);

    // Tables.
    const auto pca = pca_fit(train.measurements, 2);
    const auto tr_s_pc = pca_project(pca, split.tr_s.measurements);
    const auto sup_pc = pca_project(pca, split.sup.measurements);
    std::ostringstream points;
    points << "split,row,outside,pc1,pc2,mean_logp,var_logp,waic,flag\n";
    for (std::size_t i = 0; i < tr_s_scores.size(); ++i) {
        const auto& s = tr_s_scores[i];
        points << "tr_s," << i << ",0," << fmt(tr_s_pc(i, 0)) << ',' << fmt(tr_s_pc(i, 1)) << ',' << fmt(s.mean_logp)
               << ',' << fmt(s.var_logp) << ',' << fmt(s.waic) << ",none\n";
    }
    for (std::size_t i = 0; i < sup_scores.size(); ++i) {
        const auto& s = sup_scores[i];
        const char* f = flag[i] < 0 ? "best2" : flag[i] > 0 ? "worst2" : "none";
        points << "sup," << i << ',' << (split.sup_outside[i] ? 1 : 0) << ',' << fmt(sup_pc(i, 0)) << ','
               << fmt(sup_pc(i, 1)) << ',' << fmt(s.mean_logp) << ',' << fmt(s.var_logp) << ',' << fmt(s.waic) << ','
               << f << '\n';
    }

    std::ostringstream txt;
    txt << "In-silico superset experiment\n\n";
    txt << "config hash            " << config.hash() << '\n';
    txt << "split rule             " << config.superset_rule << " (threshold " << fmt(split.threshold) << ")\n";
    txt << "rows train/test        " << train.size() << " / " << test.size() << '\n';
    txt << "rows tr_s/sup/sup_r    " << split.tr_s.size() << " / " << split.sup.size() << " / "
        << split.sup_r.size() << '\n';
    txt << "members                " << ensemble.size() << "\n\n";
    txt << "WAIC summaries (nats)\n";
    for (const auto& s : report.summaries) {
        txt << "  " << s.name << std::string(12 - std::min<std::size_t>(12, s.name.size()), ' ') << "median "
            << fixed(s.median) << "  MAP " << fixed(s.map) << "  q02 " << fixed(s.q02) << "  q98 " << fixed(s.q98)
            << '\n';
    }
    txt << "\n|median(sup_r) - median(tr_s)|   " << fixed(report.median_gap) << '\n';
    txt << "AUROC outside vs sup_r (WAIC)     " << fixed(report.auroc) << '\n';
    txt << "AUROC outside vs sup_r (-mean lp) " << fixed(report.auroc_mean_logp) << '\n';
    txt << "worst 2% that are outside         " << fixed(report.worst2_outside_fraction) << '\n';
    txt << "best 2% that are outside          " << fixed(report.best2_outside_fraction) << '\n';
    txt << "far rays above median(tr_s)       " << fixed(report.outlier_ray_fraction) << '\n';

    report.files = {join(out_dir, "insilico_summary.csv"), join(out_dir, "insilico_points.csv"),
                    join(out_dir, "insilico_loss_curves.csv"), join(out_dir, "insilico_report.txt")};
    write_file(report.files[0], summary_table(report.summaries));
    write_file(report.files[1], points.str());
    write_file(report.files[2], loss_curve_table(ensemble));
    write_file(report.files[3], txt.str());
    return report;
}

// ---------------------------------------------------------------------------
// Scene-change experiment

SceneChangeSeries run_scene_change_experiment(const Config& config, const std::string& out_dir, std::ostream* log) {
    config.validate();
    prepare_dir(out_dir);
    const std::size_t threads = config.resolved_threads();
    const auto kind = parse_camera_kind(config.scene_camera);
    const auto matched = make_camera(kind, parse_illuminant(config.scene_train_illuminant));
    const auto mismatched = make_camera(kind, parse_illuminant(config.scene_other_illuminant));

    note(log, "simulating " + std::to_string(config.scene_train_rows) + " training spectra (" + matched.name + ", " +
                  matched.illuminant_name + ")");
    SimulationOptions sim;
    sim.noise_sigma = config.scene_noise_sigma;
    const auto train =
        simulate_dataset(config.scene_train_rows, matched, mix_seed(config.seed, kSceneTrainStream), sim);
    note(log, "training " + std::to_string(config.members) + " flows");
    const auto ensemble = train_ensemble(config.train_config(), train.measurements,
                                         mix_seed(config.seed, kSceneEnsembleStream), config.members, threads);

    // Fixed tissue field; per-pixel band vectors under each illuminant.
    const std::size_t side = config.frame_size;
    const std::size_t n_pixels = side * side;
    const std::size_t d = matched.n_bands();
    Matrix clean_matched(n_pixels, d), clean_mismatched(n_pixels, d);
    const auto field_seed = mix_seed(config.seed, kSceneFieldStream);
    for (std::size_t p = 0; p < n_pixels; ++p) {
        Rng rng(mix_seed(field_seed, p));
        const auto spectrum = reflectance_spectrum(sample_tissue_params(rng));
        const auto a = apply_camera(spectrum, matched).bands;
        const auto b = apply_camera(spectrum, mismatched).bands;
        std::copy(a.begin(), a.end(), clean_matched.row(p).begin());
        std::copy(b.begin(), b.end(), clean_mismatched.row(p).begin());
    }

    const std::size_t roi_first = (side - config.roi_size) / 2;
    std::vector<std::size_t> roi;
    for (std::size_t y = roi_first; y < roi_first + config.roi_size; ++y) {
        for (std::size_t x = roi_first; x < roi_first + config.roi_size; ++x) roi.push_back(y * side + x);
    }
    const std::size_t map_frames[2] = {config.switch_frame - 1,
                                       std::min(config.frames - 1, config.switch_frame + 10)};

    auto render = [&](std::size_t frame, std::span<const std::size_t> pixels) {
        const Matrix& clean = frame < config.switch_frame ? clean_mismatched : clean_matched;
        const auto frame_seed = mix_seed(mix_seed(config.seed, kSceneNoiseStream), frame);
        Matrix out(pixels.size(), d);
        for (std::size_t k = 0; k < pixels.size(); ++k) {
            BandMeasurement m;
            m.bands.assign(clean.row(pixels[k]).begin(), clean.row(pixels[k]).end());
            Rng rng(mix_seed(frame_seed, pixels[k]));
            m = add_noise(m, config.scene_noise_sigma, rng);
            std::copy(m.bands.begin(), m.bands.end(), out.row(k).begin());
        }
        return out;
    };

    note(log, "scoring " + std::to_string(config.frames) + " frames");
    SceneChangeSeries series;
    series.true_switch = config.switch_frame;
    std::vector<double> roi_mean_logp, roi_median_waic;
    for (std::size_t f = 0; f < config.frames; ++f) {
        const auto scores = waic_batch(ensemble, render(f, roi), threads);
        const auto w = waic_values(scores);
        series.roi_mean_waic.push_back(mean_of(w));
        roi_median_waic.push_back(median(w));
        double lp = 0.0;
        for (const auto& s : scores) lp += s.mean_logp;
        roi_mean_logp.push_back(lp / static_cast<double>(scores.size()));
    }
    series.rolling = rolling_mean(series.roi_mean_waic, config.rolling_window);
    series.detected = detect_changepoint(series.roi_mean_waic, config.switch_frame, config.rolling_window);
    series.mismatched_mean = mean_of(std::span(series.roi_mean_waic).first(config.switch_frame));
    const std::size_t settled = std::min(config.frames - 1, config.switch_frame + 10);
    series.matched_mean = mean_of(std::span(series.roi_mean_waic).subspan(settled));

    std::ostringstream table;
    table << "frame,illuminant,roi_mean_waic,roi_median_waic,roi_mean_logp,rolling_mean_waic\n";
    for (std::size_t f = 0; f < config.frames; ++f) {
        table << f << ',' << (f < config.switch_frame ? mismatched.illuminant_name : matched.illuminant_name) << ','
              << fmt(series.roi_mean_waic[f]) << ',' << fmt(roi_median_waic[f]) << ',' << fmt(roi_mean_logp[f]) << ','
              << fmt(series.rolling[f]) << '\n';
    }

    std::vector<std::size_t> all_pixels(n_pixels);
    std::iota(all_pixels.begin(), all_pixels.end(), std::size_t{0});
    std::ostringstream maps;
    maps << "frame,x,y,in_roi,waic\n";
    for (std::size_t f : map_frames) {
        const auto scores = waic_batch(ensemble, render(f, all_pixels), threads);
        for (std::size_t p = 0; p < n_pixels; ++p) {
            const std::size_t x = p % side, y = p / side;
            const bool in_roi = x >= roi_first && x < roi_first + config.roi_size && y >= roi_first &&
                                y < roi_first + config.roi_size;
            maps << f << ',' << x << ',' << y << ',' << (in_roi ? 1 : 0) << ',' << fmt(scores[p].waic) << '\n';
        }
    }

    std::ostringstream txt;
    txt << "Scene-change experiment\n\n";
    txt << "config hash          " << config.hash() << '\n';
    txt << "camera               " << matched.name << '\n';
    txt << "training illuminant  " << matched.illuminant_name << " (" << train.size() << " rows)\n";
    txt << "frames               " << config.frames << " (" << mismatched.illuminant_name << " before frame "
        << config.switch_frame << ", " << matched.illuminant_name << " after)\n";
    txt << "frame / ROI size     " << side << " / " << config.roi_size << '\n';
    txt << "members              " << ensemble.size() << "\n\n";
    txt << "mean ROI WAIC before switch        " << fmt(series.mismatched_mean) << '\n';
    txt << "mean ROI WAIC from switch + 10     " << fmt(series.matched_mean) << '\n';
    txt << "detected change frame              "
        << (series.detected ? std::to_string(*series.detected) : std::string("none")) << '\n';
    txt << "true switch frame                  " << series.true_switch << '\n';

    series.files = {join(out_dir, "scene_series.csv"), join(out_dir, "scene_maps.csv"),
                    join(out_dir, "scene_loss_curves.csv"), join(out_dir, "scene_report.txt")};
    write_file(series.files[0], table.str());
    write_file(series.files[1], maps.str());
    write_file(series.files[2], loss_curve_table(ensemble));
    write_file(series.files[3], txt.str());
    return series;
}

// ---------------------------------------------------------------------------
// Ensemble-size sweep

SweepResult run_ensemble_sweep(const Config& config, const std::string& out_dir, std::ostream* log) {
    config.validate();
    prepare_dir(out_dir);
    const std::size_t threads = config.resolved_threads();
    const auto camera = make_camera(parse_camera_kind(config.camera), parse_illuminant(config.illuminant));

    SimulationOptions sim;
    sim.noise_sigma = config.noise_sigma;
    const auto train = simulate_dataset(config.sweep_train_rows, camera, mix_seed(config.seed, kSweepTrainStream), sim);
    const auto in_dist = simulate_dataset(config.sweep_test_rows, camera, mix_seed(config.seed, kSweepInStream), sim);
    SimulationOptions odd = sim;
    odd.extra_absorber_range = std::make_pair(config.extra_absorber_min, config.extra_absorber_max);
    const auto out_dist = simulate_dataset(config.sweep_test_rows, camera, mix_seed(config.seed, kSweepOutStream), odd);

    note(log, "training " + std::to_string(config.sweep_members) + " flows on " + std::to_string(train.size()) +
                  " rows");
    const auto ensemble = train_ensemble(config.train_config(), train.measurements,
                                         mix_seed(config.seed, kSweepEnsembleStream), config.sweep_members, threads);
    const auto in_scores = waic_batch(ensemble, in_dist.measurements, threads);
    const auto out_scores = waic_batch(ensemble, out_dist.measurements, threads);

    auto prefix_waic = [](const std::vector<WaicScore>& scores, std::size_t m) {
        std::vector<double> out;
        out.reserve(scores.size());
        for (const auto& s : scores) out.push_back(waic_from_logps(std::span(s.per_member_logp).first(m)).waic);
        return out;
    };

    SweepResult result;
    std::ostringstream table;
    table << "members,mean_waic_in,mean_waic_out,median_waic_in,median_waic_out\n";
    for (std::size_t m = 2; m <= config.sweep_members; ++m) {
        const auto w_in = prefix_waic(in_scores, m);
        const auto w_out = prefix_waic(out_scores, m);
        SweepRow row{m, mean_of(w_in), mean_of(w_out), median(w_in), median(w_out)};
        table << m << ',' << fmt(row.mean_in) << ',' << fmt(row.mean_out) << ',' << fmt(row.median_in) << ','
              << fmt(row.median_out) << '\n';
        result.rows.push_back(row);
    }

    const auto& last = result.rows.back();
    std::ostringstream txt;
    txt << "Ensemble-size sweep\n\n";
    txt << "config hash        " << config.hash() << '\n';
    txt << "training rows      " << train.size() << " (" << camera.name << ", " << camera.illuminant_name << ")\n";
    txt << "evaluation rows    " << in_dist.size() << " in-distribution, " << out_dist.size()
        << " with extra absorber in [" << fmt(config.extra_absorber_min) << ", " << fmt(config.extra_absorber_max)
        << "] 1/cm\n";
    txt << "members            2.." << config.sweep_members << "\n\n";
    txt << "mean WAIC in-distribution at m = " << last.members << "   " << fixed(last.mean_in) << '\n';
    txt << "mean WAIC out-of-domain at m = " << last.members << "     " << fixed(last.mean_out) << '\n';
    if (config.sweep_members >= 10) {
        const auto& ten = result.rows[10 - 2];
        const double rel = std::abs(ten.mean_in - last.mean_in) / std::abs(last.mean_in);
        txt << "relative change in-distribution m = 10 vs " << last.members << "   " << fixed(rel) << '\n';
    }

    result.files = {join(out_dir, "sweep.csv"), join(out_dir, "sweep_loss_curves.csv"), join(out_dir, "sweep_report.txt")};
    write_file(result.files[0], table.str());
    write_file(result.files[1], loss_curve_table(ensemble));
    write_file(result.files[2], txt.str());
    return result;
}

}  // namespace waicflow

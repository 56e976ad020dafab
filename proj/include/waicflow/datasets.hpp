#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "waicflow/numcore.hpp"

namespace waicflow {

enum class SplitTag { none, train, test, tr_s, sup, sup_r };

std::string to_string(SplitTag tag);
std::optional<SplitTag> parse_split_tag(const std::string& text);

struct DatasetMeta {
    std::string camera;
    std::string illuminant;
    std::uint64_t seed = 0;
    std::string config_hash;

    bool operator==(const DatasetMeta&) const = default;
};

/// Band measurements (one spectrum per row) with optional tissue labels and a
/// per-row split tag.
struct Dataset {
    Matrix measurements;
    std::optional<Matrix> labels;
    std::vector<SplitTag> tags;
    DatasetMeta meta;

    std::size_t size() const noexcept { return measurements.rows(); }
    std::size_t dim() const noexcept { return measurements.cols(); }
    bool has_labels() const noexcept { return labels.has_value(); }

    /// Row counts agree across fields.
    void validate() const;
    Dataset subset(std::span<const std::size_t> rows) const;
    Dataset with_tag(SplitTag tag) const;

    bool operator==(const Dataset&) const = default;
};

/// Paper-scale 500k/550k train fraction.
inline constexpr double kDefaultTrainFraction = 500.0 / 550.0;

/// Seeded shuffle then cut; train receives round(train_fraction * n) rows.
std::pair<Dataset, Dataset> split_train_test(const Dataset& data, double train_fraction, Rng& rng);

// ---------------------------------------------------------------------------
// Superset split

enum class SupersetCoordinate {
    label,               // a tissue-parameter column
    principal_component  // a PCA score of the band measurements
};

struct SupersetOptions {
    SupersetCoordinate coordinate = SupersetCoordinate::principal_component;
    std::size_t index = 0;
    /// Rows whose coordinate exceeds the threshold form the outside cluster.
    /// With `threshold_is_quantile` the threshold is the given quantile of the
    /// coordinate over `train`.
    double threshold = 0.85;
    bool threshold_is_quantile = true;
    double tr_s_fraction = 0.49;
};

/// Layer-1 oxygenation cut at 0.85.
SupersetOptions label_superset_options();

struct SupersetSplit {
    Dataset tr_s;
    Dataset sup;
    Dataset sup_r;
    /// Per row of `sup`: true for the cluster outside tr_s's support.
    std::vector<bool> sup_outside;
    double threshold = 0.0;
    std::vector<double> sup_coordinate;
};

/// tr_s is a seeded random tr_s_fraction share of all rows drawn from rows at
/// or below the threshold; sup is the complement; sup_r is sup restricted to
/// rows at or below the threshold.
SupersetSplit superset_split(const Dataset& train, const SupersetOptions& options, Rng& rng);

// ---------------------------------------------------------------------------
// Persistence (comma-separated text, leading "# format=1")

void write_dataset(const Dataset& data, std::ostream& out);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// "%.17g": always parses back to the same double.
std::string format_double(double v);
/// Whole-string parse; nullopt on trailing garbage or overflow.
std::optional<double> parse_double(std::string_view text);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(std::string_view text);

// ---------------------------------------------------------------------------
// PCA and distribution summaries

struct PcaModel {
    Vector mean;
    Matrix components;  // k x d, orthonormal rows, decreasing variance
    Vector explained_variance;
    Vector explained_variance_ratio;
};

/// Eigen-decomposition of the d x d sample covariance. Component signs are
/// fixed so the largest-magnitude loading of each component is positive.
PcaModel pca_fit(const Matrix& data, std::size_t k = 2);
Matrix pca_project(const PcaModel& model, const Matrix& data);

struct SymmetricEigen {
    Vector values;   // descending
    Matrix vectors;  // column j belongs to values[j]
};

/// Cyclic Jacobi rotations; intended for small matrices.
SymmetricEigen symmetric_eigen(const Matrix& a);

/// Mode of a Gaussian KDE with Silverman bandwidth 1.06 sigma n^(-1/5):
/// 512-point grid over [min, max] followed by 3 golden-section steps.
double kde_mode(std::span<const double> samples);
double kde_density(std::span<const double> samples, double bandwidth, double x);
double silverman_bandwidth(std::span<const double> samples);

/// Linear-interpolation quantile (q in [0, 1]).
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);

}  // namespace waicflow

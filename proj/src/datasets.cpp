#include "waicflow/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "waicflow/errors.hpp"

namespace waicflow {

namespace {

constexpr const char* kLabelNames[] = {"v1", "s1", "v2", "s2", "v3", "s3", "a", "b"};
constexpr std::size_t kLabelCount = 8;

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

std::string to_string(SplitTag tag) {
    switch (tag) {
        case SplitTag::none: return "none";
        case SplitTag::train: return "train";
        case SplitTag::test: return "test";
        case SplitTag::tr_s: return "tr_s";
        case SplitTag::sup: return "sup";
        case SplitTag::sup_r: return "sup_r";
    }
    return "none";
}

std::optional<SplitTag> parse_split_tag(const std::string& text) {
    static const std::map<std::string, SplitTag> table{{"none", SplitTag::none}, {"train", SplitTag::train},
                                                       {"test", SplitTag::test}, {"tr_s", SplitTag::tr_s},
                                                       {"sup", SplitTag::sup},   {"sup_r", SplitTag::sup_r}};
    auto it = table.find(text);
    if (it == table.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------
// Dataset

void Dataset::validate() const {
    if (tags.size() != measurements.rows()) throw FormatError("dataset: tag count does not match row count");
    if (labels && labels->rows() != measurements.rows()) {
        throw FormatError("dataset: label row count does not match measurement row count");
    }
    if (labels && labels->cols() != kLabelCount) throw FormatError("dataset: labels must have 8 columns");
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.measurements = measurements.select_rows(rows);
    if (labels) out.labels = labels->select_rows(rows);
    out.tags.reserve(rows.size());
    for (auto r : rows) out.tags.push_back(tags.at(r));
    out.meta = meta;
    return out;
}

Dataset Dataset::with_tag(SplitTag tag) const {
    Dataset out = *this;
    out.tags.assign(size(), tag);
    return out;
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& data, double train_fraction, Rng& rng) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw UsageError("train fraction must be in (0, 1)");
    const std::size_t n = data.size();
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    if (n_train == 0 || n_train >= n) {
        throw UsageError("train/test split of " + std::to_string(n) + " rows leaves one side empty");
    }
    const auto order = rng.permutation(n);
    auto train = data.subset(std::span(order).first(n_train));
    auto test = data.subset(std::span(order).subspan(n_train));
    std::fill(train.tags.begin(), train.tags.end(), SplitTag::train);
    std::fill(test.tags.begin(), test.tags.end(), SplitTag::test);
    return {std::move(train), std::move(test)};
}

SupersetOptions label_superset_options() {
    SupersetOptions o;
    o.coordinate = SupersetCoordinate::label;
    o.index = 1;  // s1
    o.threshold = 0.85;
    o.threshold_is_quantile = false;
    return o;
}

SupersetSplit superset_split(const Dataset& train, const SupersetOptions& options, Rng& rng) {
    const std::size_t n = train.size();
    if (n < 2) throw UsageError("superset_split: need at least two rows");
    if (!(options.tr_s_fraction > 0.0 && options.tr_s_fraction < 1.0)) {
        throw UsageError("superset_split: tr_s fraction must be in (0, 1)");
    }

    std::vector<double> coord(n);
    if (options.coordinate == SupersetCoordinate::label) {
        if (!train.has_labels()) throw UsageError("superset_split: dataset has no tissue-parameter labels");
        if (options.index >= train.labels->cols()) throw UsageError("superset_split: label index out of range");
        for (std::size_t i = 0; i < n; ++i) coord[i] = (*train.labels)(i, options.index);
    } else {
        const auto pca = pca_fit(train.measurements, options.index + 1);
        const auto proj = pca_project(pca, train.measurements);
        for (std::size_t i = 0; i < n; ++i) coord[i] = proj(i, options.index);
    }

    SupersetSplit out;
    out.threshold = options.threshold_is_quantile ? quantile(coord, options.threshold) : options.threshold;

    std::vector<std::size_t> inside;
    for (std::size_t i = 0; i < n; ++i) {
        if (coord[i] <= out.threshold) inside.push_back(i);
    }
    const auto n_tr_s = static_cast<std::size_t>(std::llround(options.tr_s_fraction * static_cast<double>(n)));
    if (n_tr_s == 0 || n_tr_s > inside.size()) {
        throw UsageError("superset_split: " + std::to_string(inside.size()) + " in-support rows cannot supply " +
                         std::to_string(n_tr_s) + " tr_s rows");
    }

    const auto order = rng.permutation(inside.size());
    std::vector<bool> in_tr_s(n, false);
    for (std::size_t i = 0; i < n_tr_s; ++i) in_tr_s[inside[order[i]]] = true;

    std::vector<std::size_t> tr_s_rows, sup_rows, sup_r_rows;
    for (std::size_t i = 0; i < n; ++i) {
        if (in_tr_s[i]) {
            tr_s_rows.push_back(i);
        } else {
            sup_rows.push_back(i);
            const bool outside = coord[i] > out.threshold;
            out.sup_outside.push_back(outside);
            out.sup_coordinate.push_back(coord[i]);
            if (!outside) sup_r_rows.push_back(i);
        }
    }
    out.tr_s = train.subset(tr_s_rows);
    out.sup = train.subset(sup_rows);
    out.sup_r = train.subset(sup_r_rows);
    std::fill(out.tr_s.tags.begin(), out.tr_s.tags.end(), SplitTag::tr_s);
    std::fill(out.sup.tags.begin(), out.sup.tags.end(), SplitTag::sup);
    std::fill(out.sup_r.tags.begin(), out.sup_r.tags.end(), SplitTag::sup_r);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::optional<double> parse_double(std::string_view text) {
    double v = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) return std::nullopt;
    return v;
}

std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_dataset(const Dataset& data, std::ostream& out) {
    data.validate();
    out << "# format=1\n";
    for (std::size_t b = 0; b < data.dim(); ++b) out << (b ? "," : "") << "band" << b;
    if (data.labels) {
        for (const char* name : kLabelNames) out << ',' << name;
    }
    out << ",tag\n";
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (std::size_t b = 0; b < data.dim(); ++b) out << (b ? "," : "") << format_double(data.measurements(r, b));
        if (data.labels) {
            for (std::size_t c = 0; c < kLabelCount; ++c) out << ',' << format_double((*data.labels)(r, c));
        }
        out << ',' << to_string(data.tags[r]) << '\n';
    }
    out << "# dim=" << data.dim() << '\n';
    out << "# rows=" << data.size() << '\n';
    out << "# camera=" << data.meta.camera << '\n';
    out << "# illuminant=" << data.meta.illuminant << '\n';
    out << "# seed=" << data.meta.seed << '\n';
    out << "# config_hash=" << data.meta.config_hash << '\n';
}

Dataset read_dataset(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    auto next_line = [&]() -> bool {
        if (!std::getline(in, line)) return false;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
    };

    if (!next_line()) throw ParseError("empty dataset file", 1);
    if (line.rfind("# format=", 0) != 0) throw FormatError("dataset file does not start with '# format=1'");
    if (trim(line.substr(9)) != "1") throw UnsupportedVersionError("unsupported dataset format version " + line.substr(9));

    if (!next_line()) throw ParseError("missing header line", line_no + 1);
    const auto header = split_commas(line);
    if (header.empty() || header.back() != "tag") throw ParseError("header must end with 'tag'", line_no);
    std::size_t dim = 0;
    while (dim < header.size() && header[dim].rfind("band", 0) == 0) ++dim;
    const std::size_t rest = header.size() - 1 - dim;
    if (rest != 0 && rest != kLabelCount) throw ParseError("header has an unexpected number of label columns", line_no);
    const bool has_labels = rest == kLabelCount;
    if (dim == 0) throw ParseError("header has no band columns", line_no);

    std::vector<double> values;
    std::vector<double> labels;
    std::vector<SplitTag> tags;
    std::map<std::string, std::string> meta;
    bool in_meta = false;
    while (next_line()) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            in_meta = true;
            const auto body = trim(line.substr(1));
            const auto eq = body.find('=');
            if (eq == std::string::npos) throw ParseError("malformed meta line", line_no);
            meta[body.substr(0, eq)] = body.substr(eq + 1);
            continue;
        }
        if (in_meta) throw ParseError("data row after meta block", line_no);
        const auto fields = split_commas(line);
        if (fields.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()),
                             line_no);
        }
        for (std::size_t c = 0; c + 1 < fields.size(); ++c) {
            auto v = parse_double(fields[c]);
            if (!v) throw ParseError("bad number '" + fields[c] + "'", line_no);
            (c < dim ? values : labels).push_back(*v);
        }
        auto tag = parse_split_tag(fields.back());
        if (!tag) throw ParseError("unknown split tag '" + fields.back() + "'", line_no);
        tags.push_back(*tag);
    }

    const std::size_t rows = tags.size();
    if (auto it = meta.find("dim"); it != meta.end() && it->second != std::to_string(dim)) {
        throw FormatError("meta dim=" + it->second + " does not match " + std::to_string(dim) + " band columns");
    }
    if (auto it = meta.find("rows"); it != meta.end() && it->second != std::to_string(rows)) {
        throw FormatError("meta rows=" + it->second + " but file holds " + std::to_string(rows) + " rows");
    }
    if (meta.find("rows") == meta.end()) throw ParseError("missing meta block (truncated file?)", line_no + 1);

    Dataset d;
    d.measurements = Matrix(rows, dim, std::move(values));
    if (has_labels) d.labels = Matrix(rows, kLabelCount, std::move(labels));
    d.tags = std::move(tags);
    d.meta.camera = meta["camera"];
    d.meta.illuminant = meta["illuminant"];
    d.meta.config_hash = meta["config_hash"];
    try {
        d.meta.seed = std::stoull(meta.count("seed") ? meta["seed"] : "0");
    } catch (const std::exception&) {
        throw FormatError("meta seed is not an unsigned integer");
    }
    return d;
}

void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write dataset to '" + path + "'");
    write_dataset(data, out);
    if (!out) throw Error("write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open dataset '" + path + "'");
    return read_dataset(in);
}

// ---------------------------------------------------------------------------
// PCA

SymmetricEigen symmetric_eigen(const Matrix& input) {
    const std::size_t n = input.rows();
    if (input.cols() != n) throw ShapeError("symmetric_eigen: matrix must be square");
    Matrix a = input;
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        }
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    SymmetricEigen out{Vector(n), Matrix(n, n)};
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
    }
    return out;
}

PcaModel pca_fit(const Matrix& data, std::size_t k) {
    const std::size_t n = data.rows();
    const std::size_t d = data.cols();
    if (k == 0 || k > d) throw UsageError("pca_fit: k must be in [1, dim]");
    if (n <= k) throw UsageError("pca_fit: need more rows than components");

    PcaModel m;
    m.mean.assign(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) m.mean[c] += data(r, c);
    }
    for (double& v : m.mean) v /= static_cast<double>(n);

    Matrix cov(d, d);
    Vector centered(d);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) centered[c] = data(r, c) - m.mean[c];
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = i; j < d; ++j) cov(i, j) += centered[i] * centered[j];
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            cov(i, j) /= static_cast<double>(n - 1);
            cov(j, i) = cov(i, j);
        }
    }

    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) total += cov(i, i);
    if (!(total > 0.0)) throw DegenerateError("pca_fit: data has zero variance");

    const auto eig = symmetric_eigen(cov);
    m.components = Matrix(k, d);
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < d; ++i) {
            if (std::abs(eig.vectors(i, j)) > std::abs(eig.vectors(arg, j))) arg = i;
        }
        const double sign = eig.vectors(arg, j) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) m.components(j, i) = sign * eig.vectors(i, j);
        const double ev = std::max(0.0, eig.values[j]);
        m.explained_variance.push_back(ev);
        m.explained_variance_ratio.push_back(ev / total);
    }
    return m;
}

Matrix pca_project(const PcaModel& model, const Matrix& data) {
    const std::size_t d = model.mean.size();
    if (data.cols() != d) throw ShapeError("pca_project: dimension mismatch");
    const std::size_t k = model.components.rows();
    Matrix out(data.rows(), k);
    for (std::size_t r = 0; r < data.rows(); ++r) {
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += (data(r, c) - model.mean[c]) * model.components(j, c);
            out(r, j) = s;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Distribution summaries

double silverman_bandwidth(std::span<const double> samples) {
    const auto n = static_cast<double>(samples.size());
    double mean = 0.0;
    for (double v : samples) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    return 1.06 * sd * std::pow(n, -0.2);
}

double kde_density(std::span<const double> samples, double bandwidth, double x) {
    double s = 0.0;
    for (double v : samples) {
        const double u = (x - v) / bandwidth;
        s += std::exp(-0.5 * u * u);
    }
    return s / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * M_PI));
}

double kde_mode(std::span<const double> samples) {
    if (samples.size() < 10) throw UsageError("kde_mode: need at least 10 samples");
    for (double v : samples) {
        if (!std::isfinite(v)) throw DomainError("kde_mode: non-finite sample");
    }
    const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
    const double lo = *lo_it, hi = *hi_it;
    if (lo == hi) return lo;
    const double h = silverman_bandwidth(samples);

    constexpr std::size_t kGrid = 512;
    const double step = (hi - lo) / static_cast<double>(kGrid - 1);
    std::size_t best = 0;
    double best_density = -1.0;
    for (std::size_t i = 0; i < kGrid; ++i) {
        const double dens = kde_density(samples, h, lo + step * static_cast<double>(i));
        if (dens > best_density) {
            best_density = dens;
            best = i;
        }
    }

    // Golden-section refinement inside the neighbouring grid cells.
    double a = lo + step * static_cast<double>(best == 0 ? 0 : best - 1);
    double b = lo + step * static_cast<double>(std::min(best + 1, kGrid - 1));
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = kde_density(samples, h, c);
    double fd = kde_density(samples, h, d);
    for (int it = 0; it < 3; ++it) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = kde_density(samples, h, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = kde_density(samples, h, d);
        }
    }
    const double candidate = fc > fd ? c : d;
    const double grid_x = lo + step * static_cast<double>(best);
    return std::max(fc, fd) > best_density ? candidate : grid_x;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw UsageError("quantile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw UsageError("quantile level must be in [0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    if (i + 1 >= values.size()) return values.back();
    return values[i] + frac * (values[i + 1] - values[i]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace waicflow

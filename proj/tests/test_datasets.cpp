#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "waicflow/datasets.hpp"
#include "waicflow/errors.hpp"
#include "waicflow/simulator.hpp"

using namespace waicflow;

namespace {

Dataset small_labelled(std::size_t n, std::uint64_t seed) {
    return simulate_dataset(n, make_camera(CameraKind::spectrocam8, Illuminant::xenon), seed);
}

// Multiset of rows keyed by their exact values.
std::map<std::vector<double>, int> row_multiset(const Dataset& d) {
    std::map<std::vector<double>, int> m;
    for (std::size_t r = 0; r < d.size(); ++r) {
        auto row = d.measurements.row(r);
        ++m[std::vector<double>(row.begin(), row.end())];
    }
    return m;
}

Dataset plain(const Matrix& m) {
    Dataset d;
    d.measurements = m;
    d.tags.assign(m.rows(), SplitTag::none);
    return d;
}

std::string serialize(const Dataset& d) {
    std::ostringstream os;
    write_dataset(d, os);
    return os.str();
}

}  // namespace

TEST_CASE("split tags") {
    for (auto t : {SplitTag::none, SplitTag::train, SplitTag::test, SplitTag::tr_s, SplitTag::sup, SplitTag::sup_r}) {
        CHECK(parse_split_tag(to_string(t)) == t);
    }
    CHECK_FALSE(parse_split_tag("holdout").has_value());
}

TEST_CASE("split_train_test") {
    SUBCASE("paper-scale ratio on 55k rows") {
        Dataset d = plain(Matrix(55000, 8, 0.0));
        for (std::size_t r = 0; r < d.size(); ++r) d.measurements(r, 0) = static_cast<double>(r);
        Rng rng(1);
        const auto [train, test] = split_train_test(d, kDefaultTrainFraction, rng);
        CHECK(train.size() == 50000);
        CHECK(test.size() == 5000);
        CHECK(std::all_of(train.tags.begin(), train.tags.end(), [](auto t) { return t == SplitTag::train; }));
        CHECK(std::all_of(test.tags.begin(), test.tags.end(), [](auto t) { return t == SplitTag::test; }));
    }
    const auto d = small_labelled(300, 3);
    SUBCASE("same seed, same split") {
        Rng a(5), b(5);
        CHECK(split_train_test(d, 0.7, a) == split_train_test(d, 0.7, b));
    }
    SUBCASE("partition of the input") {
        Rng rng(6);
        const auto [train, test] = split_train_test(d, 0.7, rng);
        auto all = row_multiset(train);
        for (const auto& [row, count] : row_multiset(test)) all[row] += count;
        CHECK(all == row_multiset(d));
        REQUIRE(train.has_labels());
        CHECK(train.labels->rows() == train.size());
    }
    SUBCASE("errors") {
        Rng rng(1);
        CHECK_THROWS_AS(split_train_test(d, 0.0, rng), UsageError);
        CHECK_THROWS_AS(split_train_test(d, 1.0, rng), UsageError);
        CHECK_THROWS_AS(split_train_test(small_labelled(1, 1), 0.5, rng), UsageError);
    }
}

TEST_CASE("superset_split by layer-1 oxygenation") {
    const auto train = small_labelled(5000, 8);
    Rng rng(2);
    const auto split = superset_split(train, label_superset_options(), rng);
    const double frac = static_cast<double>(split.tr_s.size()) / static_cast<double>(train.size());
    CHECK(frac >= 0.47);
    CHECK(frac <= 0.51);
    CHECK(split.tr_s.size() + split.sup.size() == train.size());
    CHECK(split.threshold == 0.85);

    for (std::size_t r = 0; r < split.tr_s.size(); ++r) CHECK((*split.tr_s.labels)(r, 1) <= 0.85);
    for (std::size_t r = 0; r < split.sup_r.size(); ++r) CHECK((*split.sup_r.labels)(r, 1) <= 0.85);

    REQUIRE(split.sup_outside.size() == split.sup.size());
    std::size_t outside = 0;
    double tr_s_max = -INFINITY;
    for (std::size_t r = 0; r < split.tr_s.size(); ++r) tr_s_max = std::max(tr_s_max, (*split.tr_s.labels)(r, 1));
    for (std::size_t r = 0; r < split.sup.size(); ++r) {
        const double s1 = (*split.sup.labels)(r, 1);
        CHECK(split.sup_coordinate[r] == s1);
        if (split.sup_outside[r]) {
            ++outside;
            CHECK(s1 > 0.85);
            CHECK(s1 > tr_s_max);
        } else {
            CHECK(s1 <= 0.85);
        }
    }
    CHECK(outside > 0);
    CHECK(outside + split.sup_r.size() == split.sup.size());
    CHECK(std::all_of(split.tr_s.tags.begin(), split.tr_s.tags.end(), [](auto t) { return t == SplitTag::tr_s; }));
    CHECK(std::all_of(split.sup_r.tags.begin(), split.sup_r.tags.end(), [](auto t) { return t == SplitTag::sup_r; }));

    auto all = row_multiset(split.tr_s);
    for (const auto& [row, count] : row_multiset(split.sup)) all[row] += count;
    CHECK(all == row_multiset(train));

    Rng again(2);
    CHECK(superset_split(train, label_superset_options(), again).tr_s == split.tr_s);

    Dataset unlabelled = train;
    unlabelled.labels.reset();
    CHECK_THROWS_AS(superset_split(unlabelled, label_superset_options(), rng), UsageError);
}

TEST_CASE("superset_split by first principal component") {
    const auto train = small_labelled(4000, 9);
    Rng rng(3);
    const SupersetOptions opt;  // PC1, 85th percentile
    const auto split = superset_split(train, opt, rng);
    const auto pc = pca_project(pca_fit(train.measurements, 1), split.tr_s.measurements);
    for (std::size_t r = 0; r < pc.rows(); ++r) CHECK(pc(r, 0) <= split.threshold);
    std::size_t outside = 0;
    for (std::size_t r = 0; r < split.sup.size(); ++r) {
        if (split.sup_outside[r]) {
            ++outside;
            CHECK(split.sup_coordinate[r] > split.threshold);
        }
    }
    // 15% of all rows lie above the 85th percentile, and none are in tr_s.
    CHECK(outside == doctest::Approx(0.15 * 4000).epsilon(0.01));
    CHECK(split.tr_s.size() == 1960);

    SupersetOptions too_many = opt;
    too_many.tr_s_fraction = 0.9;
    CHECK_THROWS_AS(superset_split(train, too_many, rng), UsageError);
}

TEST_CASE("dataset persistence") {
    auto d = small_labelled(50, 4);
    for (std::size_t r = 0; r < d.size(); ++r) d.tags[r] = r % 3 == 0 ? SplitTag::test : SplitTag::train;
    d.meta.config_hash = "0123456789abcdef";
    d.measurements(3, 2) = 1e-300;
    d.measurements(4, 5) = 0.1 + 0.2;

    SUBCASE("roundtrip is exact") {
        std::istringstream in(serialize(d));
        const auto back = read_dataset(in);
        CHECK(back == d);
        CHECK(back.dim() == 8);
        CHECK(back.meta.camera == "spectrocam8");
        CHECK(back.meta.seed == 4);
    }
    SUBCASE("unlabelled roundtrip") {
        Dataset u = d;
        u.labels.reset();
        std::istringstream in(serialize(u));
        CHECK(read_dataset(in) == u);
    }
    SUBCASE("file helpers") {
        const auto dir = oracle::scratch_dir("datasets");
        save_dataset(d, dir + "/d.csv");
        CHECK(load_dataset(dir + "/d.csv") == d);
        CHECK_THROWS_AS(load_dataset(dir + "/missing.csv"), UsageError);
    }
    SUBCASE("truncated inside a row") {
        const auto text = serialize(d);
        // Line 1 is the format line, line 2 the header, line 3 + r is row r.
        std::size_t pos = 0;
        for (int i = 0; i < 12; ++i) pos = text.find('\n', pos) + 1;
        const auto cut = text.substr(0, pos + 15);
        std::istringstream in(cut);
        try {
            read_dataset(in);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 13);
        }
    }
    SUBCASE("truncated at a row boundary") {
        const auto text = serialize(d);
        std::size_t pos = 0;
        for (int i = 0; i < 20; ++i) pos = text.find('\n', pos) + 1;
        std::istringstream in(text.substr(0, pos));
        try {
            read_dataset(in);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 21);
        }
    }
    SUBCASE("bad number names its line") {
        auto text = serialize(d);
        std::size_t pos = 0;
        for (int i = 0; i < 6; ++i) pos = text.find('\n', pos) + 1;
        text.replace(pos, 3, "abc");
        std::istringstream in(text);
        try {
            read_dataset(in);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 7);
        }
    }
    SUBCASE("meta disagreeing with the header") {
        auto text = serialize(d);
        const auto at = text.find("# dim=8");
        REQUIRE(at != std::string::npos);
        text.replace(at, 7, "# dim=9");
        std::istringstream in(text);
        CHECK_THROWS_AS(read_dataset(in), FormatError);
    }
    SUBCASE("unknown version") {
        auto text = serialize(d);
        text.replace(0, 10, "# format=2");
        std::istringstream in(text);
        CHECK_THROWS_AS(read_dataset(in), UnsupportedVersionError);
    }
}

TEST_CASE("number formatting") {
    Rng rng(8);
    for (int i = 0; i < 2000; ++i) {
        const double v = std::ldexp(rng.uniform() - 0.5, static_cast<int>(rng.uniform() * 200) - 100);
        const auto back = parse_double(format_double(v));
        REQUIRE(back.has_value());
        CHECK(*back == v);
    }
    CHECK(parse_double("+1.5") == 1.5);
    CHECK_FALSE(parse_double("1.5x").has_value());
    CHECK_FALSE(parse_double("").has_value());
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("symmetric_eigen") {
    Matrix a(3, 3);
    const double vals[3][3] = {{4, 1, 0.5}, {1, 3, 0.2}, {0.5, 0.2, 1}};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) a(i, j) = vals[i][j];
    }
    const auto e = symmetric_eigen(a);
    CHECK(e.values[0] >= e.values[1]);
    CHECK(e.values[1] >= e.values[2]);
    CHECK(e.values[0] + e.values[1] + e.values[2] == doctest::Approx(8.0));
    // Product of eigenvalues equals the determinant.
    CHECK(std::log(e.values[0] * e.values[1] * e.values[2]) == doctest::Approx(oracle::log_abs_det(a)));
    for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t i = 0; i < 3; ++i) {
            double av = 0.0;
            for (std::size_t k = 0; k < 3; ++k) av += a(i, k) * e.vectors(k, j);
            CHECK(av == doctest::Approx(e.values[j] * e.vectors(i, j)).epsilon(1e-10));
        }
    }
    CHECK_THROWS_AS(symmetric_eigen(Matrix(2, 3)), ShapeError);
}

TEST_CASE("pca") {
    SUBCASE("points on a line") {
        Matrix m(100, 2);
        for (std::size_t r = 0; r < 100; ++r) {
            const double t = static_cast<double>(r) - 50.0;
            m(r, 0) = 3.0 * t;
            m(r, 1) = 4.0 * t;
        }
        const auto p = pca_fit(m, 2);
        CHECK(std::abs(p.components(0, 0)) == doctest::Approx(0.6));
        CHECK(std::abs(p.components(0, 1)) == doctest::Approx(0.8));
        CHECK(p.explained_variance_ratio[1] < 1e-12);
        CHECK(p.components(0, 1) > 0.0);  // sign rule: largest loading positive
    }
    SUBCASE("isotropic Gaussian") {
        Rng rng(4);
        const std::size_t d = 4, n = 20000;
        Matrix m(n, d);
        for (double& v : m.values()) v = rng.normal();
        const auto p = pca_fit(m, d);
        // Sampling error of each variance ratio is about sqrt(2/n); allow 5 sigma.
        for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(p.explained_variance_ratio[k] - 0.25) < 0.05);
    }
    SUBCASE("projection properties on simulated spectra") {
        const auto data = small_labelled(2000, 5).measurements;
        const auto p = pca_fit(data, 3);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < 8; ++c) dot += p.components(i, c) * p.components(j, c);
                CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-10);
            }
        }
        CHECK(p.explained_variance[0] >= p.explained_variance[1]);
        Matrix mean_row(1, 8);
        std::copy(p.mean.begin(), p.mean.end(), mean_row.row(0).begin());
        const auto at_mean = pca_project(p, mean_row);
        for (double v : at_mean.values()) CHECK(std::abs(v) < 1e-15);

        const auto proj = pca_project(p, data);
        Rng rng(2);
        for (int t = 0; t < 500; ++t) {
            const auto i = static_cast<std::size_t>(rng.uniform() * 2000);
            const auto j = static_cast<std::size_t>(rng.uniform() * 2000);
            double dx = 0.0, dp = 0.0;
            for (std::size_t c = 0; c < 8; ++c) dx += std::pow(data(i, c) - data(j, c), 2);
            for (std::size_t c = 0; c < 3; ++c) dp += std::pow(proj(i, c) - proj(j, c), 2);
            CHECK(std::sqrt(dp) <= std::sqrt(dx) + 1e-10);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(pca_fit(Matrix(10, 3, 1.0), 2), DegenerateError);
        CHECK_THROWS_AS(pca_fit(Matrix(2, 3, 1.0), 2), UsageError);
        CHECK_THROWS_AS(pca_fit(Matrix(10, 3, 1.0), 4), UsageError);
        Matrix m(10, 3);
        Rng rng(1);
        for (double& v : m.values()) v = rng.normal();
        CHECK_THROWS_AS(pca_project(pca_fit(m, 2), Matrix(2, 4)), ShapeError);
    }
}

TEST_CASE("kde_mode") {
    Rng rng(10);
    SUBCASE("standard normal") {
        std::vector<double> s(10000);
        for (double& v : s) v = rng.normal();
        CHECK(std::abs(kde_mode(s)) < 0.1);
    }
    SUBCASE("constant") { CHECK(kde_mode(std::vector<double>(20, 3.25)) == 3.25); }
    SUBCASE("bimodal") {
        std::vector<double> s(10000);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = (i % 2 ? 5.0 : -5.0) + rng.normal();
        const double m = kde_mode(s);
        CHECK(std::min(std::abs(m - 5.0), std::abs(m + 5.0)) < 0.2);
        // The mode is a local maximum of the same density.
        const double h = silverman_bandwidth(s);
        CHECK(kde_density(s, h, m) >= kde_density(s, h, m + 0.05));
        CHECK(kde_density(s, h, m) >= kde_density(s, h, m - 0.05));
    }
    SUBCASE("density integrates to one") {
        std::vector<double> s(200);
        for (double& v : s) v = rng.normal();
        const double h = silverman_bandwidth(s);
        CHECK(h == doctest::Approx(1.06 * std::pow(200.0, -0.2)).epsilon(0.15));
        CHECK(oracle::simpson([&](double x) { return kde_density(s, h, x); }, -12.0, 12.0, 2000) ==
              doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(kde_mode(std::vector<double>(5, 1.0)), UsageError);
    CHECK_THROWS_AS(kde_mode(std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, NAN}), DomainError);
}

TEST_CASE("quantile and median") {
    CHECK(quantile({1, 2, 3, 4, 5}, 0.5) == 3.0);
    CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
    CHECK(quantile({5, 1, 3}, 0.0) == 1.0);
    CHECK(quantile({5, 1, 3}, 1.0) == 5.0);
    CHECK(quantile({0, 10}, 0.25) == 2.5);
    CHECK(median({7, 1, 4, 2}) == 3.0);
    Rng rng(1);
    std::vector<double> v(101);
    for (double& x : v) x = rng.normal();
    double prev = -INFINITY;
    for (double q = 0.0; q <= 1.0; q += 0.05) {
        const double x = quantile(v, q);
        CHECK(x >= prev);
        prev = x;
    }
    CHECK_THROWS_AS(quantile({}, 0.5), UsageError);
    CHECK_THROWS_AS(quantile({1.0}, 1.5), UsageError);
}

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "waicflow/checkpoint.hpp"
#include "waicflow/errors.hpp"

using namespace waicflow;

namespace {

// Random weights, a non-trivial input scaling and a loss curve, so that every
// part of the format is exercised.
FlowModel busy_model(std::uint64_t seed) {
    auto m = FlowModel::random(FlowConfig{5, 4, 12, 2.0}, seed);
    Rng rng(seed + 100);
    auto p = m.flatten();
    for (double& v : p) v += 0.1 * rng.normal();
    m.assign(p);
    InputScaling s = InputScaling::identity(5);
    for (std::size_t i = 0; i < 5; ++i) {
        s.shift[i] = rng.normal();
        s.scale[i] = 0.1 + rng.uniform();
    }
    m.set_scaling(s);
    m.set_loss_curve({3.5, 2.25, 1.0 / 3.0});
    return m;
}

std::string to_text(const FlowModel& m) {
    std::ostringstream os;
    write_checkpoint(m, os);
    return os.str();
}

FlowModel from_text(const std::string& text) {
    std::istringstream in(text);
    return read_checkpoint(in);
}

std::string replace_line(const std::string& text, const std::string& prefix, const std::string& replacement) {
    const auto at = text.find("\n" + prefix);
    REQUIRE(at != std::string::npos);
    const auto end = text.find('\n', at + 1);
    return text.substr(0, at + 1) + replacement + text.substr(end);
}

}  // namespace

TEST_CASE("flow checkpoint roundtrip") {
    const auto model = busy_model(3);
    const auto back = from_text(to_text(model));
    CHECK(back == model);
    CHECK(back.seed() == 3);
    CHECK(back.loss_curve() == model.loss_curve());

    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        Vector x(5);
        for (double& v : x) v = 2.0 * rng.normal();
        const double a = log_likelihood(model, x), b = log_likelihood(back, x);
        CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)));
    }
    CHECK(to_text(back) == to_text(model));

    const auto dir = oracle::scratch_dir("checkpoint_file");
    save_checkpoint(model, dir + "/m.ckpt");
    CHECK(load_checkpoint(dir + "/m.ckpt") == model);
    CHECK_THROWS_AS(load_checkpoint(dir + "/none.ckpt"), UsageError);
}

TEST_CASE("corrupt checkpoints") {
    const auto text = to_text(busy_model(4));
    SUBCASE("corrupted weight line") {
        const auto bad = replace_line(text, "block.1.layer.0.weight=", "block.1.layer.0.weight=0.5,zz,1");
        CHECK_THROWS_AS(from_text(bad), ParseError);
    }
    SUBCASE("short weight line") {
        const auto bad = replace_line(text, "block.0.layer.2.bias=", "block.0.layer.2.bias=1,2");
        CHECK_THROWS_AS(from_text(bad), ParseError);
    }
    SUBCASE("truncated") {
        CHECK_THROWS_AS(from_text(text.substr(0, text.size() / 2)), ParseError);
        CHECK_THROWS_AS(from_text(""), ParseError);
    }
    SUBCASE("version mismatch") {
        CHECK_THROWS_AS(from_text(replace_line(text, "format_version=", "format_version=2")), UnsupportedVersionError);
        auto other = text;
        other.replace(0, 10, "# format=7");
        CHECK_THROWS_AS(from_text(other), UnsupportedVersionError);
    }
    SUBCASE("wrong kind") {
        CHECK_THROWS_AS(from_text(replace_line(text, "kind=", "kind=ensemble")), FormatError);
    }
    SUBCASE("error names the line") {
        std::size_t line = 1;
        const auto key = text.find("\nblock.2.layer.1.bias=");
        for (std::size_t i = 0; i <= key; ++i) line += text[i] == '\n';
        try {
            from_text(replace_line(text, "block.2.layer.1.bias=", "block.2.layer.1.bias=nan?"));
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == line);
        }
    }
}

TEST_CASE("ensemble manifest") {
    std::vector<FlowModel> members;
    for (std::uint64_t s = 0; s < 5; ++s) members.push_back(busy_model(mix_seed(20, s)));
    const Ensemble ens(members);
    const auto dir = oracle::scratch_dir("checkpoint_manifest");

    const auto manifest = save_ensemble(ens, dir + "/manifest.txt", "feedfacecafebeef");
    CHECK(manifest.members.size() == 5);
    CHECK(manifest.config_hash == "feedfacecafebeef");
    CHECK(manifest.members[2].file == "member_2.ckpt");

    SUBCASE("five members load") {
        const auto back = load_ensemble(dir + "/manifest.txt");
        REQUIRE(back.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) CHECK(back.members()[i] == members[i]);
        CHECK(back.member_seeds() == ens.member_seeds());
    }
    SUBCASE("manifest text roundtrip") {
        std::ostringstream os;
        write_manifest(manifest, os);
        std::istringstream in(os.str());
        const auto back = read_manifest(in);
        CHECK(back.config_hash == manifest.config_hash);
        REQUIRE(back.members.size() == 5);
        CHECK(back.members[4].seed == manifest.members[4].seed);
    }
    SUBCASE("manifest can be loaded from another working directory") {
        const auto cwd = std::filesystem::current_path();
        std::filesystem::current_path(std::filesystem::temp_directory_path());
        CHECK(load_ensemble(dir + "/manifest.txt").size() == 5);
        std::filesystem::current_path(cwd);
    }
    SUBCASE("missing member") {
        std::filesystem::remove(dir + "/member_3.ckpt");
        CHECK_THROWS_AS(load_ensemble(dir + "/manifest.txt"), ManifestError);
    }
    SUBCASE("seed disagreement") {
        save_checkpoint(busy_model(999), dir + "/member_1.ckpt");
        CHECK_THROWS_AS(load_ensemble(dir + "/manifest.txt"), ManifestError);
    }
    SUBCASE("a single member is not an ensemble") {
        std::ofstream out(dir + "/one.txt");
        write_manifest(Manifest{"x", {manifest.members[0]}}, out);
        out.close();
        CHECK_THROWS_AS(load_ensemble(dir + "/one.txt"), ManifestError);
    }
}

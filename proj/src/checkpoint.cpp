#include "waicflow/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "waicflow/datasets.hpp"
#include "waicflow/errors.hpp"

namespace waicflow {

namespace {

namespace fs = std::filesystem;

void write_values(std::ostream& out, const std::string& key, std::span<const double> values) {
    out << key << '=';
    for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << format_double(values[i]);
    out << '\n';
}

// Sequential reader over "key=value" lines; every accessor names the line
// it failed on.
class LineReader {
public:
    explicit LineReader(std::istream& in) : in_(in) {}

    std::size_t line_no() const noexcept { return line_no_; }

    std::string expect(const std::string& key) {
        std::string line;
        if (!std::getline(in_, line)) throw ParseError("unexpected end of file, expected '" + key + "'", line_no_ + 1);
        ++line_no_;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto eq = line.find('=');
        if (eq == std::string::npos || line.substr(0, eq) != key) {
            throw ParseError("expected '" + key + "=...'", line_no_);
        }
        return line.substr(eq + 1);
    }

    std::uint64_t expect_u64(const std::string& key) {
        const auto text = expect(key);
        try {
            std::size_t pos = 0;
            const auto v = std::stoull(text, &pos);
            if (pos != text.size() || text.front() == '-') throw std::invalid_argument(text);
            return v;
        } catch (const std::exception&) {
            throw ParseError("'" + key + "' is not an unsigned integer", line_no_);
        }
    }

    double expect_double(const std::string& key) {
        const auto v = parse_double(expect(key));
        if (!v) throw ParseError("'" + key + "' is not a number", line_no_);
        return *v;
    }

    Vector expect_values(const std::string& key, std::size_t count) {
        const auto text = expect(key);
        Vector out;
        if (count != kAnyCount) out.reserve(count);
        if (!text.empty()) {
            std::size_t start = 0;
            while (true) {
                const auto pos = text.find(',', start);
                const auto v = parse_double(std::string_view(text).substr(start, pos - start));
                if (!v) throw ParseError("bad number in '" + key + "'", line_no_);
                out.push_back(*v);
                if (pos == std::string::npos) break;
                start = pos + 1;
            }
        }
        if (count != kAnyCount && out.size() != count) {
            throw ParseError("'" + key + "' has " + std::to_string(out.size()) + " values, expected " +
                                 std::to_string(count),
                             line_no_);
        }
        return out;
    }

    static constexpr std::size_t kAnyCount = static_cast<std::size_t>(-1);

    void expect_format_header() {
        std::string line;
        if (!std::getline(in_, line)) throw ParseError("empty file", 1);
        ++line_no_;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("# format=", 0) != 0) throw FormatError("file does not start with '# format=1'");
        if (line.substr(9) != "1") throw UnsupportedVersionError("unsupported file format " + line.substr(9));
    }

private:
    std::istream& in_;
    std::size_t line_no_ = 0;
};

std::string layer_key(std::size_t block, std::size_t layer, const char* what) {
    return "block." + std::to_string(block) + ".layer." + std::to_string(layer) + "." + what;
}

}  // namespace

void write_checkpoint(const FlowModel& model, std::ostream& out) {
    out << "# format=1\n";
    out << "kind=flow\n";
    out << "format_version=" << kCheckpointFormatVersion << '\n';
    out << "input_dim=" << model.input_dim() << '\n';
    out << "n_blocks=" << model.n_blocks() << '\n';
    out << "hidden_width=" << model.hidden_width() << '\n';
    out << "clamp_alpha=" << format_double(model.clamp_alpha()) << '\n';
    out << "seed=" << model.seed() << '\n';
    write_values(out, "input_shift", model.scaling().shift);
    write_values(out, "input_scale", model.scaling().scale);
    for (std::size_t k = 0; k < model.n_blocks(); ++k) {
        out << "perm." << k << '=';
        const auto& idx = model.permutations()[k].indices();
        for (std::size_t i = 0; i < idx.size(); ++i) out << (i ? "," : "") << idx[i];
        out << '\n';
    }
    for (std::size_t k = 0; k < model.n_blocks(); ++k) {
        const auto& net = model.blocks()[k].subnet();
        for (std::size_t j = 0; j < Mlp::kDepth; ++j) {
            write_values(out, layer_key(k, j, "weight"), net.layer(j).weight.values());
            write_values(out, layer_key(k, j, "bias"), net.layer(j).bias);
        }
    }
    write_values(out, "loss_curve", model.loss_curve());
    out << "end=flow\n";
}

FlowModel read_checkpoint(std::istream& in) {
    LineReader r(in);
    r.expect_format_header();
    if (r.expect("kind") != "flow") throw FormatError("not a flow checkpoint");
    const auto version = r.expect_u64("format_version");
    if (version != static_cast<std::uint64_t>(kCheckpointFormatVersion)) {
        throw UnsupportedVersionError("unsupported checkpoint format_version " + std::to_string(version));
    }
    const auto dim = r.expect_u64("input_dim");
    const auto n_blocks = r.expect_u64("n_blocks");
    const auto hidden = r.expect_u64("hidden_width");
    if (dim < 2 || n_blocks < 1 || hidden < 1) throw FormatError("checkpoint architecture fields are out of range");
    const double alpha = r.expect_double("clamp_alpha");
    const auto seed = r.expect_u64("seed");

    InputScaling scaling;
    scaling.shift = r.expect_values("input_shift", dim);
    scaling.scale = r.expect_values("input_scale", dim);

    std::vector<Permutation> perms;
    for (std::size_t k = 0; k < n_blocks; ++k) {
        const auto values = r.expect_values("perm." + std::to_string(k), dim);
        std::vector<std::size_t> idx;
        for (double v : values) {
            if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
                throw ParseError("permutation entry is not an index", r.line_no());
            }
            idx.push_back(static_cast<std::size_t>(v));
        }
        perms.emplace_back(std::move(idx));
    }

    const std::size_t split = (dim + 1) / 2;
    const std::size_t out_dim = 2 * (dim - split);
    const std::array<std::size_t, Mlp::kDepth + 1> widths{split, hidden, hidden, out_dim};
    std::vector<CouplingBlock> blocks;
    for (std::size_t k = 0; k < n_blocks; ++k) {
        std::array<DenseLayer, Mlp::kDepth> layers;
        for (std::size_t j = 0; j < Mlp::kDepth; ++j) {
            auto w = r.expect_values(layer_key(k, j, "weight"), widths[j + 1] * widths[j]);
            layers[j].weight = Matrix(widths[j + 1], widths[j], std::move(w));
            layers[j].bias = r.expect_values(layer_key(k, j, "bias"), widths[j + 1]);
        }
        blocks.emplace_back(dim, Mlp(std::move(layers)), alpha);
    }
    auto curve = r.expect_values("loss_curve", LineReader::kAnyCount);
    if (r.expect("end") != "flow") throw ParseError("expected 'end=flow'", r.line_no());

    FlowModel model(std::move(scaling), std::move(blocks), std::move(perms), seed);
    model.set_loss_curve(std::move(curve));
    return model;
}

void save_checkpoint(const FlowModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write checkpoint '" + path + "'");
    write_checkpoint(model, out);
    if (!out) throw Error("write failed for '" + path + "'");
}

FlowModel load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in);
}

void write_manifest(const Manifest& manifest, std::ostream& out) {
    out << "# format=1\n";
    out << "kind=ensemble\n";
    out << "format_version=" << kCheckpointFormatVersion << '\n';
    out << "config_hash=" << manifest.config_hash << '\n';
    out << "members=" << manifest.members.size() << '\n';
    for (std::size_t i = 0; i < manifest.members.size(); ++i) {
        out << "member." << i << '=' << manifest.members[i].file << ',' << manifest.members[i].seed << '\n';
    }
    out << "end=ensemble\n";
}

Manifest read_manifest(std::istream& in) {
    LineReader r(in);
    r.expect_format_header();
    if (r.expect("kind") != "ensemble") throw ManifestError("not an ensemble manifest");
    const auto version = r.expect_u64("format_version");
    if (version != static_cast<std::uint64_t>(kCheckpointFormatVersion)) {
        throw UnsupportedVersionError("unsupported manifest format_version " + std::to_string(version));
    }
    Manifest m;
    m.config_hash = r.expect("config_hash");
    const auto count = r.expect_u64("members");
    for (std::size_t i = 0; i < count; ++i) {
        const auto text = r.expect("member." + std::to_string(i));
        const auto comma = text.rfind(',');
        if (comma == std::string::npos || comma == 0) throw ParseError("member entry needs 'file,seed'", r.line_no());
        ManifestEntry e;
        e.file = text.substr(0, comma);
        try {
            std::size_t pos = 0;
            e.seed = std::stoull(text.substr(comma + 1), &pos);
            if (pos != text.size() - comma - 1) throw std::invalid_argument(text);
        } catch (const std::exception&) {
            throw ParseError("member seed is not an unsigned integer", r.line_no());
        }
        m.members.push_back(std::move(e));
    }
    if (r.expect("end") != "ensemble") throw ParseError("expected 'end=ensemble'", r.line_no());
    return m;
}

Manifest save_ensemble(const Ensemble& ensemble, const std::string& manifest_path, const std::string& config_hash) {
    const fs::path manifest(manifest_path);
    const fs::path dir = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
    Manifest m{config_hash, {}};
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const std::string file = "member_" + std::to_string(i) + ".ckpt";
        save_checkpoint(ensemble.members()[i], (dir / file).string());
        m.members.push_back({file, ensemble.members()[i].seed()});
    }
    std::ofstream out(manifest);
    if (!out) throw UsageError("cannot write manifest '" + manifest_path + "'");
    write_manifest(m, out);
    if (!out) throw Error("write failed for '" + manifest_path + "'");
    return m;
}

Ensemble load_ensemble(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw UsageError("cannot open manifest '" + manifest_path + "'");
    const auto m = read_manifest(in);
    const fs::path manifest(manifest_path);
    const fs::path dir = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
    std::vector<FlowModel> members;
    for (const auto& e : m.members) {
        const auto path = dir / e.file;
        if (!fs::exists(path)) throw ManifestError("member checkpoint '" + path.string() + "' is missing");
        auto model = load_checkpoint(path.string());
        if (model.seed() != e.seed) {
            throw ManifestError("member '" + e.file + "' has seed " + std::to_string(model.seed()) +
                                ", manifest says " + std::to_string(e.seed));
        }
        members.push_back(std::move(model));
    }
    if (members.size() < 2) throw ManifestError("manifest lists fewer than two members");
    return Ensemble(std::move(members));
}

}  // namespace waicflow

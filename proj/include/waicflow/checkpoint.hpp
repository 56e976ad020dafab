#pragma once

// Text checkpoints for single flows and ensemble manifests.
//
// A flow checkpoint is line-oriented "key=value" text led by "# format=1".
// Weights are written row-major with 17 significant digits, so loading
// reproduces every parameter bit for bit. A manifest lists member
// checkpoint files by path relative to the manifest's directory.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "waicflow/flow.hpp"
#include "waicflow/waic.hpp"

namespace waicflow {

inline constexpr int kCheckpointFormatVersion = 1;

void write_checkpoint(const FlowModel& model, std::ostream& out);
/// Throws ParseError (with line number) on malformed content and
/// UnsupportedVersionError on a format version other than 1.
FlowModel read_checkpoint(std::istream& in);

void save_checkpoint(const FlowModel& model, const std::string& path);
FlowModel load_checkpoint(const std::string& path);

struct ManifestEntry {
    std::string file;  // relative to the manifest directory
    std::uint64_t seed = 0;
};

struct Manifest {
    std::string config_hash;
    std::vector<ManifestEntry> members;
};

void write_manifest(const Manifest& manifest, std::ostream& out);
Manifest read_manifest(std::istream& in);

/// Writes member_<i>.ckpt files next to `manifest_path` and the manifest
/// itself. Returns the manifest that was written.
Manifest save_ensemble(const Ensemble& ensemble, const std::string& manifest_path, const std::string& config_hash);
/// Throws ManifestError if a member file is missing.
Ensemble load_ensemble(const std::string& manifest_path);

}  // namespace waicflow

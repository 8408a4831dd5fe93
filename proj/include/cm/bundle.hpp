#pragma once

#include "cm/specs.hpp"
#include "cm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

// The on-disk merge artifact: K group checkpoints, per-expert index tensors,
// and a manifest. Directory layout:
//   group_<k>.safetensors   k in [0, K)
//   indices.safetensors     tensors "<expert>/<layer>", dtype U32, shape [O, 1]
//   manifest.json           format_version, experts[], k, lambda,
//                           prune{kind,ratio,rescale},
//                           cluster{strategy,metric,granularity,restarts,max_iters},
//                           seed, base_sha256

namespace cm {

// Per-expert group membership: layer name -> one group index per output
// channel (S in the merge equations).
using IndexTensor = std::map<std::string, std::vector<std::uint32_t>>;

struct Manifest {
    int format_version = 1;
    std::vector<std::string> experts; // lexicographic; defines summation order
    MergeSpec spec;
    std::string base_sha256;

    bool operator==(const Manifest&) const = default;
};

// Canonical JSON bytes (used for manifest.json and `inspect`).
std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);

struct MergedBundle {
    std::vector<Checkpoint> groups;            // size K
    std::map<std::string, IndexTensor> indices; // expert name -> index tensor
    Manifest manifest;
};

// Throws BundleError if the bundle violates a MergedBundle invariant
// (K >= 1, N >= 1, K <= N, groups aligned, indices covering every
// expert/layer with entries < K).
void validate_bundle(const MergedBundle& bundle);

void save_bundle(const MergedBundle& bundle, const std::filesystem::path& dir);

// Loads and fully validates; any inconsistency between manifest, files, and
// index values is a BundleError.
MergedBundle load_bundle(const std::filesystem::path& dir);

} // namespace cm

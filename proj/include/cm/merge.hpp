#pragma once

#include "cm/bundle.hpp"
#include "cm/cluster.hpp"
#include "cm/delta.hpp"

#include <cstddef>
#include <string>

// The merge itself (group rows = base + lambda * sum of member deltas), the
// index-lookup reconstruction, and the storage accounting.

namespace cm {

// Filled by reconstruct when requested; reconstruction is a pure row gather,
// so element_copies always lands exactly on the parameter count.
struct GatherStats {
    std::size_t element_copies = 0;
};

struct StorageReport {
    std::size_t weight_params = 0;   // K * psi
    std::size_t index_entries = 0;   // N * total output channels
    std::size_t ensemble_params = 0; // N * psi
    double weight_ratio = 0.0;       // K / N
    double total_ratio = 0.0;        // (weight bytes + index bytes) / ensemble bytes
};

// Builds the K group checkpoints and per-expert index tensors. For each
// layer, channel i, group g: row = base_i + lambda * (sum of member delta
// rows, experts in manifest order; empty sum leaves the base row untouched
// bitwise). Output is a pure function of (deltas, assignments, spec),
// independent of thread count.
MergedBundle merge(const DeltaSet& deltas, const AssignmentTable& assignments,
                   const MergeSpec& spec, unsigned threads = 1);

// Gathers rows group-by-index; performs no floating-point arithmetic on
// weights. Throws UsageError for an unknown expert, BundleError for an
// out-of-range index.
Checkpoint reconstruct(const MergedBundle& bundle, const std::string& expert,
                       GatherStats* stats = nullptr);

StorageReport storage_report(const MergedBundle& bundle);

} // namespace cm

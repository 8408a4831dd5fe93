#pragma once

#include "cm/delta.hpp"
#include "cm/specs.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

// Grouping of delta parameters across experts: k-means (k-medians under the
// Manhattan metric) with k-means++ initialization and restarts, plus the
// random and sign ablation strategies, at channel, layer, or model
// granularity. Every path is deterministic given (inputs, spec, seed) and
// independent of thread count; per-channel RNG streams are derived as
// seed ^ fnv1a64(layer) ^ channel so results do not depend on iteration
// order.

namespace cm {

struct AssignmentTable {
    Granularity granularity = Granularity::channel;
    std::size_t n_experts = 0;
    std::size_t k = 0;
    // channel granularity: per layer, O*N entries laid out channel-major
    // (entry [channel * N + expert]); layer granularity: per layer, N entries.
    std::map<std::string, std::vector<std::uint32_t>> per_layer;
    // model granularity: N entries.
    std::vector<std::uint32_t> model_labels;

    // Resolves granularity broadcast: the group of `expert` at `channel` of
    // `layer`.
    std::uint32_t label(const std::string& layer, std::size_t channel,
                        std::size_t expert) const;
};

// Lloyd's algorithm over the N rows with spec.metric, spec.restarts
// independent k-means++ starts, and at most spec.max_iters iterations per
// start (converged when assignments stop changing). Cosine rows are
// L2-normalized first; zero-norm rows are pinned to group 0. Empty clusters
// are repaired by moving in the point farthest from its centroid (only if
// that distance is nonzero). Labels are canonicalized by first occurrence.
// Optional outputs: per-restart objective traces and the winning objective.
std::vector<std::uint32_t> cluster_rows(
    const std::vector<std::span<const float>>& rows, const ClusterSpec& spec,
    std::uint64_t stream_seed,
    std::vector<std::vector<double>>* restart_traces = nullptr,
    double* objective_out = nullptr);

// Uniform labels in [0, k); pure function of (n, k, stream_seed).
std::vector<std::uint32_t> assign_random(std::size_t n, std::size_t k,
                                         std::uint64_t stream_seed);

// Two-group sign rule: elected vector gamma = sign(sum of rows); row n goes
// to group 0 if <row_n, gamma> >= 0, else group 1.
std::vector<std::uint32_t> assign_sign(const std::vector<std::span<const float>>& rows,
                                       std::uint64_t stream_seed);

// Full table for the delta set under spec.granularity/spec.strategy.
AssignmentTable build_assignments(const DeltaSet& deltas, const ClusterSpec& spec,
                                  unsigned threads = 1);

namespace cluster_detail {

// Pairwise statistics streamed layer by layer (lexicographic order); the
// concatenated per-expert delta vectors are never materialized.
struct PairwiseStats {
    std::size_t n = 0;
    std::vector<double> dot; // n*n, dot[a*n+b] = <delta_a, delta_b>
    std::vector<double> l1;  // n*n, pairwise L1 distances
};

PairwiseStats stream_pairwise_stats(const DeltaSet& deltas);

// Model-granularity clustering on streamed statistics: cosine/euclidean run
// Lloyd in the Gram representation (distances to implicit mean centroids);
// manhattan runs k-medoids on the pairwise L1 matrix, since coordinate-wise
// medians would need the concatenated vectors.
std::vector<std::uint32_t> cluster_pairwise(
    const PairwiseStats& stats, const ClusterSpec& spec, std::uint64_t stream_seed,
    std::vector<std::vector<double>>* restart_traces = nullptr,
    double* objective_out = nullptr);

} // namespace cluster_detail

} // namespace cm

#pragma once

#include "cm/bundle.hpp"
#include "cm/tensor.hpp"

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Diagnostics: per-layer channel-similarity proportions (which candidate
// expert each reference channel is closest to) and the post-merge expert
// overlap matrix (fraction of channels whose group indices coincide).

namespace cm {

// <u,v> / (||u|| ||v||), clamped to [-1, 1]; 0 when either norm is zero.
double cosine(std::span<const float> u, std::span<const float> v);

struct SimilarityReport {
    bool use_deltas = true;
    std::vector<std::string> candidates;
    // layer -> one proportion per candidate (same order as `candidates`);
    // proportions per layer sum to 1 up to rounding.
    std::map<std::string, std::vector<double>> proportions;
};

// For every layer and reference channel row, finds the candidate with the
// highest cosine similarity (rows taken as deltas against `base` when
// use_deltas, else raw weights; ties go to the lowest candidate index) and
// reports winner counts normalized by the channel count.
SimilarityReport similarity_proportions(
    const Checkpoint& base, const Checkpoint& reference,
    const std::vector<std::pair<std::string, Checkpoint>>& candidates,
    bool use_deltas = true, unsigned threads = 1);

struct OverlapMatrix {
    std::vector<std::string> experts;
    std::vector<double> values; // n*n row-major; symmetric, unit diagonal

    double at(std::size_t a, std::size_t b) const {
        return values[a * experts.size() + b];
    }
};

// Entry (a, b) = fraction of channels (across all layers) where experts a
// and b were merged into the same group.
OverlapMatrix expert_overlap(const MergedBundle& bundle);

// CSV round-trips are exact: doubles are printed with 17 significant digits.
// similarity.csv: "layer,candidate,proportion" with a leading comment line
// recording the rows mode and tie rule; overlap.csv: "expert_a,expert_b,fraction".
std::string similarity_csv(const SimilarityReport& report);
SimilarityReport similarity_from_csv(const std::string& text);
std::string overlap_csv(const OverlapMatrix& matrix);
OverlapMatrix overlap_from_csv(const std::string& text);

} // namespace cm

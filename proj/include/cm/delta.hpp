#pragma once

#include "cm/specs.hpp"
#include "cm/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>

// Delta computation (expert minus base) and the two pre-merge pruning
// schemes: DARE (random zeroing with optional 1/(1-p) rescale) and TIES
// (magnitude trim plus sign election). All operations are deterministic;
// randomness comes only from explicitly derived per-layer RNG streams.

namespace cm {

struct DeltaSet {
    Checkpoint base;
    // Expert name -> delta checkpoint, shape-aligned with base. std::map
    // iteration gives the canonical (manifest) expert order used for every
    // summation.
    std::map<std::string, Checkpoint> deltas;
    PruneSpec prune;

    std::size_t expert_count() const { return deltas.size(); }
};

// Element-wise expert - base. Throws DataError naming the first mismatched
// or missing layer.
Checkpoint compute_delta(const Checkpoint& base, const Checkpoint& expert,
                         unsigned threads = 1);

// Zeroes each element independently with probability p, using a per-layer
// stream seeded seed ^ fnv1a64(layer name); survivors are multiplied by
// 1/(1-p) when rescale is set. Zero elements stay zero bitwise.
Checkpoint dare_prune(const Checkpoint& delta, double p, bool rescale,
                      std::uint64_t seed, unsigned threads = 1);

// Two phases per layer: (a) per expert, keep the ceil((1-p) * O * I)
// largest-magnitude elements (boundary ties keep the lower flat index);
// (b) per coordinate, elect sign gamma = sign(sum of trimmed deltas over
// experts) and zero trimmed elements whose sign disagrees (gamma = 0 keeps
// all). The base and prune spec are carried through unchanged.
DeltaSet ties_prune(const DeltaSet& deltas, double p, unsigned threads = 1);

// Applies deltas.prune: none is a pass-through, dare runs per expert with
// stream seed `seed ^ fnv1a64(expert name)` so expert masks are independent,
// ties runs jointly across experts.
DeltaSet apply_pruning(const DeltaSet& deltas, std::uint64_t seed,
                       unsigned threads = 1);

} // namespace cm

#pragma once

#include <cstdint>
#include <string>

// Run-configuration value types shared by the pruning, clustering, and merge
// stages. Every field here is echoed verbatim into a bundle's manifest, so
// the enum <-> string mappings below define the on-disk vocabulary.

namespace cm {

enum class PruneKind { none, dare, ties };
enum class Strategy { kmeans, random_assign, sign };
enum class Metric { cosine, euclidean, manhattan };
enum class Granularity { channel, layer, model };

const char* to_string(PruneKind v);
const char* to_string(Strategy v);
const char* to_string(Metric v);
const char* to_string(Granularity v);

// Each throws DataError on an unknown name.
PruneKind prune_kind_from(const std::string& s);
Strategy strategy_from(const std::string& s);
Metric metric_from(const std::string& s);
Granularity granularity_from(const std::string& s);

struct PruneSpec {
    PruneKind kind = PruneKind::dare;
    double ratio = 0.3;
    bool rescale = true;

    bool operator==(const PruneSpec&) const = default;
};

struct ClusterSpec {
    std::size_t k = 2;
    Strategy strategy = Strategy::kmeans;
    Metric metric = Metric::cosine;
    Granularity granularity = Granularity::channel;
    std::size_t restarts = 8;
    std::size_t max_iters = 100;
    std::uint64_t seed = 0;

    bool operator==(const ClusterSpec&) const = default;
};

struct MergeSpec {
    double lambda = 0.5;
    ClusterSpec cluster;
    PruneSpec prune;

    bool operator==(const MergeSpec&) const = default;
};

// Validates ranges (k >= 1, restarts >= 1, max_iters >= 1, ratio in [0,1),
// lambda finite, sign strategy only with k == 2); throws UsageError.
void validate(const MergeSpec& spec);

} // namespace cm

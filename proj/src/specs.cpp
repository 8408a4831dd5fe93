#include "cm/specs.hpp"

#include "cm/errors.hpp"

#include <cmath>

namespace cm {

const char* to_string(PruneKind v) {
    switch (v) {
    case PruneKind::none:
        return "none";
    case PruneKind::dare:
        return "dare";
    case PruneKind::ties:
        return "ties";
    }
    return "?";
}

const char* to_string(Strategy v) {
    switch (v) {
    case Strategy::kmeans:
        return "kmeans";
    case Strategy::random_assign:
        return "random";
    case Strategy::sign:
        return "sign";
    }
    return "?";
}

const char* to_string(Metric v) {
    switch (v) {
    case Metric::cosine:
        return "cosine";
    case Metric::euclidean:
        return "euclidean";
    case Metric::manhattan:
        return "manhattan";
    }
    return "?";
}

const char* to_string(Granularity v) {
    switch (v) {
    case Granularity::channel:
        return "channel";
    case Granularity::layer:
        return "layer";
    case Granularity::model:
        return "model";
    }
    return "?";
}

PruneKind prune_kind_from(const std::string& s) {
    if (s == "none") return PruneKind::none;
    if (s == "dare") return PruneKind::dare;
    if (s == "ties") return PruneKind::ties;
    throw DataError("unknown prune kind '" + s + "' (expected none, dare, or ties)");
}

Strategy strategy_from(const std::string& s) {
    if (s == "kmeans") return Strategy::kmeans;
    if (s == "random") return Strategy::random_assign;
    if (s == "sign") return Strategy::sign;
    throw DataError("unknown cluster strategy '" + s + "' (expected kmeans, random, or sign)");
}

Metric metric_from(const std::string& s) {
    if (s == "cosine") return Metric::cosine;
    if (s == "euclidean") return Metric::euclidean;
    if (s == "manhattan") return Metric::manhattan;
    throw DataError("unknown metric '" + s + "' (expected cosine, euclidean, or manhattan)");
}

Granularity granularity_from(const std::string& s) {
    if (s == "channel") return Granularity::channel;
    if (s == "layer") return Granularity::layer;
    if (s == "model") return Granularity::model;
    throw DataError("unknown granularity '" + s + "' (expected channel, layer, or model)");
}

void validate(const MergeSpec& spec) {
    if (!std::isfinite(spec.lambda))
        throw UsageError("lambda must be finite");
    if (spec.cluster.k < 1)
        throw UsageError("k must be at least 1");
    if (spec.cluster.restarts < 1)
        throw UsageError("restarts must be at least 1");
    if (spec.cluster.max_iters < 1)
        throw UsageError("max-iters must be at least 1");
    if (spec.prune.ratio < 0.0 || spec.prune.ratio >= 1.0)
        throw UsageError("prune ratio must be in [0, 1)");
    if (spec.cluster.strategy == Strategy::sign && spec.cluster.k != 2)
        throw UsageError("sign strategy defined only for two groups");
}

} // namespace cm

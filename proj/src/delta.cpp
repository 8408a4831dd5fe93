#include "cm/delta.hpp"

#include "cm/errors.hpp"
#include "cm/kernels.hpp"
#include "cm/parallel.hpp"
#include "cm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace cm {

namespace {

void check_ratio(double p) {
    if (!(p >= 0.0) || p >= 1.0)
        throw UsageError("prune ratio must be in [0, 1)");
}

std::vector<const std::string*> layer_names(const Checkpoint& ckpt) {
    std::vector<const std::string*> names;
    names.reserve(ckpt.layers.size());
    for (const auto& [name, t] : ckpt.layers) {
        (void)t;
        names.push_back(&name);
    }
    return names;
}

} // namespace

Checkpoint compute_delta(const Checkpoint& base, const Checkpoint& expert,
                         unsigned threads) {
    require_aligned(base, expert);
    Checkpoint out;
    out.name = expert.name;
    for (const auto& [name, t] : base.layers)
        out.layers.emplace(name, Tensor2D(t.rows, t.cols)).first->second.from_rank1 =
            t.from_rank1;

    const auto names = layer_names(base);
    parallel_for(names.size(), threads, [&](std::size_t li) {
        const std::string& name = *names[li];
        const Tensor2D& b = base.layers.at(name);
        const Tensor2D& e = expert.layers.at(name);
        kern::sub(out.layers.at(name).data.data(), e.data.data(), b.data.data(),
                  b.size());
    });
    return out;
}

Checkpoint dare_prune(const Checkpoint& delta, double p, bool rescale,
                      std::uint64_t seed, unsigned threads) {
    check_ratio(p);
    Checkpoint out = delta;
    const float factor = rescale ? static_cast<float>(1.0 / (1.0 - p)) : 1.0f;

    const auto names = layer_names(out);
    parallel_for(names.size(), threads, [&](std::size_t li) {
        const std::string& name = *names[li];
        Tensor2D& t = out.layers.at(name);
        SplitMix64 rng(seed ^ fnv1a64(name));
        for (float& v : t.data) {
            if (rng.uniform() < p)
                v = 0.0f;
            else
                v *= factor;
        }
    });
    return out;
}

DeltaSet ties_prune(const DeltaSet& deltas, double p, unsigned threads) {
    check_ratio(p);
    if (deltas.deltas.empty()) throw DataError("delta set has no experts");

    DeltaSet out;
    out.base = deltas.base;
    out.prune = deltas.prune;
    for (const auto& [expert, ckpt] : deltas.deltas) out.deltas.emplace(expert, ckpt);

    const auto names = layer_names(deltas.base);
    parallel_for(names.size(), threads, [&](std::size_t li) {
        const std::string& layer = *names[li];
        const std::size_t n = deltas.base.layers.at(layer).size();
        const std::size_t keep =
            static_cast<std::size_t>(std::ceil((1.0 - p) * static_cast<double>(n)));

        // Phase (a): per-expert magnitude trim. Boundary ties keep the lower
        // flat index, which the (magnitude desc, index asc) ordering encodes.
        for (auto& [expert, ckpt] : out.deltas) {
            (void)expert;
            std::vector<float>& v = ckpt.layers.at(layer).data;
            if (keep >= n) continue;
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            auto rank = [&](std::size_t a, std::size_t b) {
                const float ma = std::fabs(v[a]);
                const float mb = std::fabs(v[b]);
                if (ma != mb) return ma > mb;
                return a < b;
            };
            std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                             order.end(), rank);
            std::vector<float> trimmed(n, 0.0f);
            for (std::size_t i = 0; i < keep; ++i) trimmed[order[i]] = v[order[i]];
            v = std::move(trimmed);
        }

        // Phase (b): sign election across experts, canonical expert order.
        std::vector<double> total(n, 0.0);
        for (const auto& [expert, ckpt] : out.deltas) {
            (void)expert;
            const std::vector<float>& v = ckpt.layers.at(layer).data;
            for (std::size_t i = 0; i < n; ++i) total[i] += static_cast<double>(v[i]);
        }
        for (auto& [expert, ckpt] : out.deltas) {
            (void)expert;
            std::vector<float>& v = ckpt.layers.at(layer).data;
            for (std::size_t i = 0; i < n; ++i) {
                if (total[i] > 0.0 && v[i] < 0.0f) v[i] = 0.0f;
                if (total[i] < 0.0 && v[i] > 0.0f) v[i] = 0.0f;
            }
        }
    });
    return out;
}

DeltaSet apply_pruning(const DeltaSet& deltas, std::uint64_t seed, unsigned threads) {
    switch (deltas.prune.kind) {
    case PruneKind::none:
        return deltas;
    case PruneKind::dare: {
        DeltaSet out;
        out.base = deltas.base;
        out.prune = deltas.prune;
        for (const auto& [expert, ckpt] : deltas.deltas)
            out.deltas.emplace(expert,
                               dare_prune(ckpt, deltas.prune.ratio, deltas.prune.rescale,
                                          seed ^ fnv1a64(expert), threads));
        return out;
    }
    case PruneKind::ties:
        return ties_prune(deltas, deltas.prune.ratio, threads);
    }
    throw std::runtime_error("unreachable prune kind");
}

} // namespace cm

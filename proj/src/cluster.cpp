#include "cm/cluster.hpp"

#include "cm/errors.hpp"
#include "cm/kernels.hpp"
#include "cm/parallel.hpp"
#include "cm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace cm {

std::uint32_t AssignmentTable::label(const std::string& layer, std::size_t channel,
                                     std::size_t expert) const {
    switch (granularity) {
    case Granularity::channel:
        return per_layer.at(layer)[channel * n_experts + expert];
    case Granularity::layer:
        return per_layer.at(layer)[expert];
    case Granularity::model:
        return model_labels[expert];
    }
    throw std::runtime_error("unreachable granularity");
}

namespace {

// Renumbers labels by first occurrence so restarts that find the same
// partition under permuted labels produce identical output.
void canonicalize(std::vector<std::uint32_t>& labels) {
    std::map<std::uint32_t, std::uint32_t> remap;
    for (std::uint32_t& l : labels) {
        auto [it, fresh] = remap.emplace(l, static_cast<std::uint32_t>(remap.size()));
        (void)fresh;
        l = it->second;
    }
}

double vec_dist(Metric metric, const float* a, const float* b, std::size_t d) {
    if (metric == Metric::manhattan)
        return static_cast<double>(kern::l1_distance(a, b, d));
    return static_cast<double>(kern::squared_distance(a, b, d));
}

// k-means++ seeding over an arbitrary point-to-point distance callable.
// Returns the chosen point indices; consumes the shared restart RNG stream.
template <typename DistFn>
std::vector<std::size_t> kmeanspp_pick(std::size_t m, std::size_t k, SplitMix64& rng,
                                       DistFn&& dist) {
    std::vector<std::size_t> chosen;
    chosen.reserve(k);
    chosen.push_back(rng.below(m));
    std::vector<double> best(m);
    for (std::size_t i = 0; i < m; ++i) best[i] = dist(i, chosen[0]);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double v : best) total += v;
        std::size_t pick = 0;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double cum = 0.0;
            bool found = false;
            for (std::size_t i = 0; i < m; ++i) {
                cum += best[i];
                if (u < cum) {
                    pick = i;
                    found = true;
                    break;
                }
            }
            if (!found) { // floating-point edge: u landed at/after the last bin
                for (std::size_t i = m; i-- > 0;)
                    if (best[i] > 0.0) {
                        pick = i;
                        break;
                    }
            }
        } else {
            pick = rng.below(m);
        }
        chosen.push_back(pick);
        for (std::size_t i = 0; i < m; ++i) best[i] = std::min(best[i], dist(i, pick));
    }
    return chosen;
}

struct LloydResult {
    std::vector<std::uint32_t> labels;
    double objective = 0.0;
    std::vector<double> trace;
};

// One Lloyd run over m points of dimension d stored contiguously in `pts`.
LloydResult lloyd_once(const float* pts, std::size_t m, std::size_t d, std::size_t k,
                       Metric metric, std::size_t max_iters, SplitMix64& rng) {
    auto point = [&](std::size_t i) { return pts + i * d; };
    const std::vector<std::size_t> seeds =
        kmeanspp_pick(m, k, rng, [&](std::size_t a, std::size_t b) {
            return vec_dist(metric, point(a), point(b), d);
        });

    std::vector<float> centroids(k * d);
    for (std::size_t c = 0; c < k; ++c)
        std::memcpy(centroids.data() + c * d, point(seeds[c]), d * sizeof(float));

    LloydResult res;
    res.labels.assign(m, 0);
    std::vector<std::uint32_t> prev;
    std::vector<std::size_t> count(k);
    std::vector<float> scratch;

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Assign to the nearest centroid; ties go to the lowest index.
        for (std::size_t i = 0; i < m; ++i) {
            std::uint32_t best_c = 0;
            double best_d = vec_dist(metric, point(i), centroids.data(), d);
            for (std::size_t c = 1; c < k; ++c) {
                const double dd = vec_dist(metric, point(i), centroids.data() + c * d, d);
                if (dd < best_d) {
                    best_d = dd;
                    best_c = static_cast<std::uint32_t>(c);
                }
            }
            res.labels[i] = best_c;
        }
        std::fill(count.begin(), count.end(), 0);
        for (std::uint32_t l : res.labels) ++count[l];

        // Repair empties: move in the point farthest from its centroid, taken
        // from a cluster that keeps at least one member, and only if it is at
        // a nonzero distance (coincident points stay put).
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] != 0) continue;
            double far_d = 0.0;
            std::size_t far_i = m;
            for (std::size_t i = 0; i < m; ++i) {
                if (count[res.labels[i]] < 2) continue;
                const double dd =
                    vec_dist(metric, point(i), centroids.data() + res.labels[i] * d, d);
                if (dd > far_d) {
                    far_d = dd;
                    far_i = i;
                }
            }
            if (far_i != m) {
                --count[res.labels[far_i]];
                res.labels[far_i] = static_cast<std::uint32_t>(c);
                count[c] = 1;
            }
        }

        // Update centroids of non-empty clusters (mean, or per-coordinate
        // lower-middle median for the Manhattan metric).
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) continue;
            float* ctr = centroids.data() + c * d;
            if (metric == Metric::manhattan) {
                scratch.resize(count[c]);
                for (std::size_t j = 0; j < d; ++j) {
                    std::size_t t = 0;
                    for (std::size_t i = 0; i < m; ++i)
                        if (res.labels[i] == c) scratch[t++] = point(i)[j];
                    auto mid = scratch.begin() +
                               static_cast<std::ptrdiff_t>((scratch.size() - 1) / 2);
                    std::nth_element(scratch.begin(), mid, scratch.end());
                    ctr[j] = *mid;
                }
            } else {
                std::vector<double> acc(d, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    if (res.labels[i] != c) continue;
                    const float* p = point(i);
                    for (std::size_t j = 0; j < d; ++j) acc[j] += static_cast<double>(p[j]);
                }
                for (std::size_t j = 0; j < d; ++j)
                    ctr[j] = static_cast<float>(acc[j] / static_cast<double>(count[c]));
            }
        }

        double obj = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            obj += vec_dist(metric, point(i), centroids.data() + res.labels[i] * d, d);
        res.trace.push_back(obj);
        res.objective = obj;

        if (res.labels == prev) break;
        prev = res.labels;
    }
    return res;
}

template <typename RunFn>
LloydResult best_of_restarts(std::size_t restarts, std::uint64_t stream_seed,
                             std::vector<std::vector<double>>* traces, RunFn&& run) {
    SplitMix64 rng(stream_seed);
    LloydResult best;
    bool have = false;
    for (std::size_t r = 0; r < restarts; ++r) {
        LloydResult res = run(rng);
        if (traces) traces->push_back(res.trace);
        if (!have || res.objective < best.objective) {
            best = std::move(res);
            have = true;
        }
    }
    return best;
}

} // namespace

std::vector<std::uint32_t> cluster_rows(const std::vector<std::span<const float>>& rows,
                                        const ClusterSpec& spec, std::uint64_t stream_seed,
                                        std::vector<std::vector<double>>* restart_traces,
                                        double* objective_out) {
    const std::size_t n = rows.size();
    if (n == 0) throw DataError("no rows to cluster");
    const std::size_t d = rows[0].size();
    if (d == 0) throw DataError("rows have zero length");
    for (const auto& r : rows)
        if (r.size() != d) throw DataError("rows have differing lengths");
    const std::size_t k = spec.k;
    if (k < 1) throw UsageError("k must be at least 1");
    if (k > n)
        throw UsageError("k=" + std::to_string(k) + " exceeds the number of rows (" +
                         std::to_string(n) + ")");

    // Cosine: normalize into the working buffer and pin zero-norm rows to
    // group 0 (their direction is undefined). Other metrics cluster all rows.
    std::vector<std::size_t> active;
    std::vector<float> buf;
    buf.reserve(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        if (spec.metric == Metric::cosine) {
            const float sq = kern::squared_norm(rows[i].data(), d);
            if (sq == 0.0f) continue;
            const float norm = std::sqrt(sq);
            active.push_back(i);
            for (std::size_t j = 0; j < d; ++j) buf.push_back(rows[i][j] / norm);
        } else {
            active.push_back(i);
            buf.insert(buf.end(), rows[i].begin(), rows[i].end());
        }
    }

    std::vector<std::uint32_t> labels(n, 0);
    double objective = 0.0;
    if (!active.empty()) {
        const std::size_t m = active.size();
        const std::size_t ek = std::min(k, m);
        LloydResult best = best_of_restarts(
            spec.restarts, stream_seed, restart_traces, [&](SplitMix64& rng) {
                return lloyd_once(buf.data(), m, d, ek, spec.metric, spec.max_iters, rng);
            });
        canonicalize(best.labels);
        for (std::size_t j = 0; j < m; ++j) labels[active[j]] = best.labels[j];
        objective = best.objective;
    }
    if (objective_out) *objective_out = objective;
    return labels;
}

std::vector<std::uint32_t> assign_random(std::size_t n, std::size_t k,
                                         std::uint64_t stream_seed) {
    if (k == 0) throw UsageError("k must be at least 1");
    SplitMix64 rng(stream_seed);
    std::vector<std::uint32_t> labels(n);
    for (std::uint32_t& l : labels) l = static_cast<std::uint32_t>(rng.below(k));
    return labels;
}

std::vector<std::uint32_t> assign_sign(const std::vector<std::span<const float>>& rows,
                                       std::uint64_t stream_seed) {
    (void)stream_seed; // the rule is deterministic; kept for signature symmetry
    const std::size_t n = rows.size();
    if (n == 0) throw DataError("no rows to cluster");
    const std::size_t d = rows[0].size();
    if (d == 0) throw DataError("rows have zero length");
    for (const auto& r : rows)
        if (r.size() != d) throw DataError("rows have differing lengths");

    std::vector<double> sum(d, 0.0);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) sum[j] += static_cast<double>(r[j]);

    std::vector<std::uint32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            if (sum[j] > 0.0)
                dot += static_cast<double>(rows[i][j]);
            else if (sum[j] < 0.0)
                dot -= static_cast<double>(rows[i][j]);
        }
        labels[i] = dot >= 0.0 ? 0u : 1u;
    }
    return labels;
}

namespace cluster_detail {

PairwiseStats stream_pairwise_stats(const DeltaSet& deltas) {
    PairwiseStats stats;
    stats.n = deltas.deltas.size();
    stats.dot.assign(stats.n * stats.n, 0.0);
    stats.l1.assign(stats.n * stats.n, 0.0);

    std::vector<const Checkpoint*> experts;
    experts.reserve(stats.n);
    for (const auto& [name, ckpt] : deltas.deltas) {
        (void)name;
        experts.push_back(&ckpt);
    }

    for (const auto& [layer, base_t] : deltas.base.layers) {
        const std::size_t sz = base_t.size();
        for (std::size_t a = 0; a < stats.n; ++a) {
            const float* pa = experts[a]->layers.at(layer).data.data();
            for (std::size_t b = a; b < stats.n; ++b) {
                const float* pb = experts[b]->layers.at(layer).data.data();
                stats.dot[a * stats.n + b] += static_cast<double>(kern::dot(pa, pb, sz));
                if (a != b)
                    stats.l1[a * stats.n + b] +=
                        static_cast<double>(kern::l1_distance(pa, pb, sz));
            }
        }
    }
    for (std::size_t a = 0; a < stats.n; ++a)
        for (std::size_t b = 0; b < a; ++b) {
            stats.dot[a * stats.n + b] = stats.dot[b * stats.n + a];
            stats.l1[a * stats.n + b] = stats.l1[b * stats.n + a];
        }
    return stats;
}

namespace {

// Lloyd in the Gram representation: centroids are implicit means of member
// sets; squared distance of point a to the mean of set S is
//   G_aa - (2/|S|) sum_{b in S} G_ab + (1/|S|^2) sum_{b,b' in S} G_bb'.
class GramLloyd {
public:
    GramLloyd(const std::vector<double>& gram, std::size_t m) : g_(gram), m_(m) {}

    double point_dist(std::size_t a, std::size_t b) const {
        return std::max(0.0, g_[a * m_ + a] + g_[b * m_ + b] - 2.0 * g_[a * m_ + b]);
    }

    double set_dist(std::size_t a, const std::vector<std::size_t>& members) const {
        const double s = static_cast<double>(members.size());
        double cross = 0.0;
        for (std::size_t b : members) cross += g_[a * m_ + b];
        double within = 0.0;
        for (std::size_t b : members)
            for (std::size_t b2 : members) within += g_[b * m_ + b2];
        return std::max(0.0, g_[a * m_ + a] - 2.0 * cross / s + within / (s * s));
    }

    LloydResult run(std::size_t k, std::size_t max_iters, SplitMix64& rng) const {
        const std::vector<std::size_t> seeds = kmeanspp_pick(
            m_, k, rng, [&](std::size_t a, std::size_t b) { return point_dist(a, b); });

        // Member sets defining the current centroids.
        std::vector<std::vector<std::size_t>> sets(k);
        for (std::size_t c = 0; c < k; ++c) sets[c] = {seeds[c]};

        LloydResult res;
        res.labels.assign(m_, 0);
        std::vector<std::uint32_t> prev;
        std::vector<std::size_t> count(k);

        for (std::size_t iter = 0; iter < max_iters; ++iter) {
            for (std::size_t i = 0; i < m_; ++i) {
                std::uint32_t best_c = 0;
                double best_d = sets[0].empty() ? std::numeric_limits<double>::infinity()
                                                : set_dist(i, sets[0]);
                for (std::size_t c = 1; c < k; ++c) {
                    if (sets[c].empty()) continue;
                    const double dd = set_dist(i, sets[c]);
                    if (dd < best_d) {
                        best_d = dd;
                        best_c = static_cast<std::uint32_t>(c);
                    }
                }
                res.labels[i] = best_c;
            }
            std::fill(count.begin(), count.end(), 0);
            for (std::uint32_t l : res.labels) ++count[l];

            for (std::size_t c = 0; c < k; ++c) {
                if (count[c] != 0) continue;
                double far_d = 0.0;
                std::size_t far_i = m_;
                for (std::size_t i = 0; i < m_; ++i) {
                    if (count[res.labels[i]] < 2) continue;
                    if (sets[res.labels[i]].empty()) continue;
                    const double dd = set_dist(i, sets[res.labels[i]]);
                    if (dd > far_d) {
                        far_d = dd;
                        far_i = i;
                    }
                }
                if (far_i != m_) {
                    --count[res.labels[far_i]];
                    res.labels[far_i] = static_cast<std::uint32_t>(c);
                    count[c] = 1;
                }
            }

            for (std::size_t c = 0; c < k; ++c) sets[c].clear();
            for (std::size_t i = 0; i < m_; ++i) sets[res.labels[i]].push_back(i);

            double obj = 0.0;
            for (std::size_t i = 0; i < m_; ++i) obj += set_dist(i, sets[res.labels[i]]);
            res.trace.push_back(obj);
            res.objective = obj;

            if (res.labels == prev) break;
            prev = res.labels;
        }
        return res;
    }

private:
    const std::vector<double>& g_;
    std::size_t m_;
};

// k-medoids on a pairwise distance matrix (Manhattan at model granularity):
// medoid update picks the member minimizing the within-cluster distance sum,
// ties to the lowest index.
LloydResult medoids_once(const std::vector<double>& dist, std::size_t m, std::size_t k,
                         std::size_t max_iters, SplitMix64& rng) {
    auto dd = [&](std::size_t a, std::size_t b) { return dist[a * m + b]; };
    std::vector<std::size_t> medoid =
        kmeanspp_pick(m, k, rng, [&](std::size_t a, std::size_t b) { return dd(a, b); });

    LloydResult res;
    res.labels.assign(m, 0);
    std::vector<std::uint32_t> prev;
    std::vector<std::size_t> count(k);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        for (std::size_t i = 0; i < m; ++i) {
            std::uint32_t best_c = 0;
            double best_d = dd(i, medoid[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double v = dd(i, medoid[c]);
                if (v < best_d) {
                    best_d = v;
                    best_c = static_cast<std::uint32_t>(c);
                }
            }
            res.labels[i] = best_c;
        }
        std::fill(count.begin(), count.end(), 0);
        for (std::uint32_t l : res.labels) ++count[l];

        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] != 0) continue;
            double far_d = 0.0;
            std::size_t far_i = m;
            for (std::size_t i = 0; i < m; ++i) {
                if (count[res.labels[i]] < 2) continue;
                const double v = dd(i, medoid[res.labels[i]]);
                if (v > far_d) {
                    far_d = v;
                    far_i = i;
                }
            }
            if (far_i != m) {
                --count[res.labels[far_i]];
                res.labels[far_i] = static_cast<std::uint32_t>(c);
                count[c] = 1;
                medoid[c] = far_i;
            }
        }

        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) continue;
            double best_sum = std::numeric_limits<double>::infinity();
            std::size_t best_x = medoid[c];
            for (std::size_t x = 0; x < m; ++x) {
                if (res.labels[x] != c) continue;
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                    if (res.labels[i] == c) s += dd(i, x);
                if (s < best_sum) {
                    best_sum = s;
                    best_x = x;
                }
            }
            medoid[c] = best_x;
        }

        double obj = 0.0;
        for (std::size_t i = 0; i < m; ++i) obj += dd(i, medoid[res.labels[i]]);
        res.trace.push_back(obj);
        res.objective = obj;

        if (res.labels == prev) break;
        prev = res.labels;
    }
    return res;
}

} // namespace

std::vector<std::uint32_t> cluster_pairwise(const PairwiseStats& stats,
                                            const ClusterSpec& spec,
                                            std::uint64_t stream_seed,
                                            std::vector<std::vector<double>>* restart_traces,
                                            double* objective_out) {
    const std::size_t n = stats.n;
    if (n == 0) throw DataError("no experts to cluster");
    const std::size_t k = spec.k;
    if (k < 1) throw UsageError("k must be at least 1");
    if (k > n)
        throw UsageError("k=" + std::to_string(k) + " exceeds the number of experts (" +
                         std::to_string(n) + ")");

    // Cosine excludes zero-norm experts (pinned to group 0) and works on the
    // normalized Gram; euclidean uses the raw Gram; manhattan uses L1 medoids.
    std::vector<std::size_t> active;
    if (spec.metric == Metric::cosine) {
        for (std::size_t a = 0; a < n; ++a)
            if (stats.dot[a * n + a] > 0.0) active.push_back(a);
    } else {
        active.resize(n);
        for (std::size_t a = 0; a < n; ++a) active[a] = a;
    }

    std::vector<std::uint32_t> labels(n, 0);
    double objective = 0.0;
    if (!active.empty()) {
        const std::size_t m = active.size();
        const std::size_t ek = std::min(k, m);

        std::vector<double> mat(m * m);
        if (spec.metric == Metric::manhattan) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    mat[i * m + j] = stats.l1[active[i] * n + active[j]];
        } else if (spec.metric == Metric::cosine) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    mat[i * m + j] =
                        stats.dot[active[i] * n + active[j]] /
                        (std::sqrt(stats.dot[active[i] * n + active[i]]) *
                         std::sqrt(stats.dot[active[j] * n + active[j]]));
        } else {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    mat[i * m + j] = stats.dot[active[i] * n + active[j]];
        }

        LloydResult best = best_of_restarts(
            spec.restarts, stream_seed, restart_traces, [&](SplitMix64& rng) {
                if (spec.metric == Metric::manhattan)
                    return medoids_once(mat, m, ek, spec.max_iters, rng);
                return GramLloyd(mat, m).run(ek, spec.max_iters, rng);
            });
        canonicalize(best.labels);
        for (std::size_t j = 0; j < m; ++j) labels[active[j]] = best.labels[j];
        objective = best.objective;
    }
    if (objective_out) *objective_out = objective;
    return labels;
}

} // namespace cluster_detail

namespace {

std::vector<std::uint32_t> model_sign_labels(const DeltaSet& deltas) {
    const std::size_t n = deltas.deltas.size();
    std::vector<const Checkpoint*> experts;
    experts.reserve(n);
    for (const auto& [name, ckpt] : deltas.deltas) {
        (void)name;
        experts.push_back(&ckpt);
    }
    std::vector<double> dot(n, 0.0);
    std::vector<double> sums;
    for (const auto& [layer, base_t] : deltas.base.layers) {
        const std::size_t sz = base_t.size();
        sums.assign(sz, 0.0);
        for (std::size_t e = 0; e < n; ++e) {
            const float* p = experts[e]->layers.at(layer).data.data();
            for (std::size_t i = 0; i < sz; ++i) sums[i] += static_cast<double>(p[i]);
        }
        for (std::size_t e = 0; e < n; ++e) {
            const float* p = experts[e]->layers.at(layer).data.data();
            for (std::size_t i = 0; i < sz; ++i) {
                if (sums[i] > 0.0)
                    dot[e] += static_cast<double>(p[i]);
                else if (sums[i] < 0.0)
                    dot[e] -= static_cast<double>(p[i]);
            }
        }
    }
    std::vector<std::uint32_t> labels(n);
    for (std::size_t e = 0; e < n; ++e) labels[e] = dot[e] >= 0.0 ? 0u : 1u;
    return labels;
}

std::vector<std::uint32_t> dispatch_rows(const std::vector<std::span<const float>>& rows,
                                         const ClusterSpec& spec, std::uint64_t stream_seed) {
    switch (spec.strategy) {
    case Strategy::kmeans:
        return cluster_rows(rows, spec, stream_seed);
    case Strategy::random_assign:
        return assign_random(rows.size(), spec.k, stream_seed);
    case Strategy::sign:
        return assign_sign(rows, stream_seed);
    }
    throw std::runtime_error("unreachable strategy");
}

} // namespace

AssignmentTable build_assignments(const DeltaSet& deltas, const ClusterSpec& spec,
                                  unsigned threads) {
    const std::size_t n = deltas.deltas.size();
    if (n == 0) throw DataError("delta set has no experts");
    if (spec.k < 1) throw UsageError("k must be at least 1");
    if (spec.k > n)
        throw UsageError("k=" + std::to_string(spec.k) +
                         " exceeds the number of experts (" + std::to_string(n) + ")");
    if (spec.restarts < 1) throw UsageError("restarts must be at least 1");
    if (spec.max_iters < 1) throw UsageError("max-iters must be at least 1");
    if (spec.strategy == Strategy::sign && spec.k != 2)
        throw UsageError("sign strategy defined only for two groups");
    for (const auto& [name, ckpt] : deltas.deltas) {
        (void)name;
        require_aligned(deltas.base, ckpt);
    }

    std::vector<const Checkpoint*> experts;
    experts.reserve(n);
    for (const auto& [name, ckpt] : deltas.deltas) {
        (void)name;
        experts.push_back(&ckpt);
    }

    AssignmentTable table;
    table.granularity = spec.granularity;
    table.n_experts = n;
    table.k = spec.k;

    switch (spec.granularity) {
    case Granularity::channel: {
        for (const auto& [layer, base_t] : deltas.base.layers) {
            const std::string& lname = layer;
            std::vector<std::uint32_t>& out =
                table.per_layer.emplace(layer, std::vector<std::uint32_t>(base_t.rows * n))
                    .first->second;
            const std::uint64_t layer_seed = spec.seed ^ fnv1a64(layer);
            const std::size_t cols = base_t.cols;
            parallel_for(base_t.rows, threads, [&, layer_seed, cols](std::size_t ch) {
                std::vector<std::span<const float>> rows;
                rows.reserve(n);
                for (const Checkpoint* e : experts)
                    rows.emplace_back(e->layers.at(lname).row(ch), cols);
                const std::vector<std::uint32_t> labels =
                    dispatch_rows(rows, spec, layer_seed ^ static_cast<std::uint64_t>(ch));
                std::copy(labels.begin(), labels.end(), out.begin() + ch * n);
            });
        }
        break;
    }
    case Granularity::layer: {
        std::vector<const std::string*> names;
        for (const auto& [layer, base_t] : deltas.base.layers) {
            (void)base_t;
            table.per_layer.emplace(layer, std::vector<std::uint32_t>(n));
            names.push_back(&layer);
        }
        parallel_for(names.size(), threads, [&](std::size_t li) {
            const std::string& layer = *names[li];
            std::vector<std::span<const float>> rows;
            rows.reserve(n);
            for (const Checkpoint* e : experts) {
                const Tensor2D& t = e->layers.at(layer);
                rows.emplace_back(t.data.data(), t.size());
            }
            const std::vector<std::uint32_t> labels =
                dispatch_rows(rows, spec, spec.seed ^ fnv1a64(layer));
            std::copy(labels.begin(), labels.end(), table.per_layer.at(layer).begin());
        });
        break;
    }
    case Granularity::model: {
        switch (spec.strategy) {
        case Strategy::kmeans: {
            const cluster_detail::PairwiseStats stats =
                cluster_detail::stream_pairwise_stats(deltas);
            table.model_labels = cluster_detail::cluster_pairwise(stats, spec, spec.seed);
            break;
        }
        case Strategy::random_assign:
            table.model_labels = assign_random(n, spec.k, spec.seed);
            break;
        case Strategy::sign:
            table.model_labels = model_sign_labels(deltas);
            break;
        }
        break;
    }
    }
    return table;
}

} // namespace cm

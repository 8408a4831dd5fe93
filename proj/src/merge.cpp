#include "cm/merge.hpp"

#include "cm/errors.hpp"
#include "cm/kernels.hpp"
#include "cm/parallel.hpp"
#include "cm/tensor_io.hpp"

#include <cstring>
#include <vector>

namespace cm {

namespace {

void check_table(const DeltaSet& deltas, const AssignmentTable& table,
                 const MergeSpec& spec) {
    const std::size_t n = deltas.deltas.size();
    const std::size_t k = spec.cluster.k;
    if (table.n_experts != n)
        throw DataError("assignment table covers " + std::to_string(table.n_experts) +
                        " experts but the delta set has " + std::to_string(n));
    if (table.k != k)
        throw DataError("assignment table was built for k=" + std::to_string(table.k) +
                        " but the merge spec requests k=" + std::to_string(k));
    if (table.granularity != spec.cluster.granularity)
        throw DataError("assignment table granularity does not match the merge spec");

    auto check_labels = [&](const std::vector<std::uint32_t>& labels) {
        for (std::uint32_t l : labels)
            if (l >= k)
                throw DataError("assignment index " + std::to_string(l) +
                                " is out of range for k=" + std::to_string(k));
    };
    switch (table.granularity) {
    case Granularity::channel:
        for (const auto& [layer, t] : deltas.base.layers) {
            auto it = table.per_layer.find(layer);
            if (it == table.per_layer.end() || it->second.size() != t.rows * n)
                throw DataError("assignment table does not cover layer '" + layer + "'");
            check_labels(it->second);
        }
        break;
    case Granularity::layer:
        for (const auto& [layer, t] : deltas.base.layers) {
            (void)t;
            auto it = table.per_layer.find(layer);
            if (it == table.per_layer.end() || it->second.size() != n)
                throw DataError("assignment table does not cover layer '" + layer + "'");
            check_labels(it->second);
        }
        break;
    case Granularity::model:
        if (table.model_labels.size() != n)
            throw DataError("assignment table model labels do not cover all experts");
        check_labels(table.model_labels);
        break;
    }
}

} // namespace

MergedBundle merge(const DeltaSet& deltas, const AssignmentTable& assignments,
                   const MergeSpec& spec, unsigned threads) {
    validate(spec);
    const std::size_t n = deltas.deltas.size();
    const std::size_t k = spec.cluster.k;
    if (n == 0) throw DataError("delta set has no experts");
    if (k > n)
        throw UsageError("k=" + std::to_string(k) + " exceeds the number of experts (" +
                         std::to_string(n) + ")");
    for (const auto& [name, ckpt] : deltas.deltas) {
        (void)name;
        require_aligned(deltas.base, ckpt);
    }
    check_table(deltas, assignments, spec);

    std::vector<const Checkpoint*> experts;
    MergedBundle bundle;
    bundle.manifest.format_version = 1;
    bundle.manifest.spec = spec;
    bundle.manifest.base_sha256 = checkpoint_sha256(deltas.base);
    for (const auto& [name, ckpt] : deltas.deltas) {
        bundle.manifest.experts.push_back(name);
        experts.push_back(&ckpt);
    }

    // Groups start as copies of the base; only rows with members are touched,
    // so empty-cluster rows stay bitwise equal to the base.
    bundle.groups.assign(k, Checkpoint{});
    for (std::size_t g = 0; g < k; ++g) {
        bundle.groups[g].name = "group_" + std::to_string(g);
        bundle.groups[g].layers = deltas.base.layers;
    }

    const float lambda = static_cast<float>(spec.lambda);
    for (const auto& [layer, base_tensor] : deltas.base.layers) {
        const std::string& lname = layer;
        const Tensor2D& bt = base_tensor;
        const std::size_t cols = bt.cols;
        std::vector<Tensor2D*> group_t(k);
        for (std::size_t g = 0; g < k; ++g) group_t[g] = &bundle.groups[g].layers.at(lname);

        parallel_for(bt.rows, threads, [&, cols](std::size_t ch) {
            std::vector<std::uint32_t> labels(n);
            for (std::size_t e = 0; e < n; ++e)
                labels[e] = assignments.label(lname, ch, e);
            std::vector<float> sum(cols);
            for (std::size_t g = 0; g < k; ++g) {
                bool any = false;
                for (std::size_t e = 0; e < n; ++e) {
                    if (labels[e] != g) continue;
                    const float* row = experts[e]->layers.at(lname).row(ch);
                    if (!any) {
                        std::memcpy(sum.data(), row, cols * sizeof(float));
                        any = true;
                    } else {
                        kern::add_inplace(sum.data(), row, cols);
                    }
                }
                if (any)
                    kern::scale_add(group_t[g]->row(ch), bt.row(ch), lambda, sum.data(),
                                    cols);
            }
        });
    }

    for (std::size_t e = 0; e < n; ++e) {
        IndexTensor idx;
        for (const auto& [layer, base_t] : deltas.base.layers) {
            std::vector<std::uint32_t> values(base_t.rows);
            for (std::size_t ch = 0; ch < base_t.rows; ++ch)
                values[ch] = assignments.label(layer, ch, e);
            idx.emplace(layer, std::move(values));
        }
        bundle.indices.emplace(bundle.manifest.experts[e], std::move(idx));
    }

    validate_bundle(bundle);
    return bundle;
}

Checkpoint reconstruct(const MergedBundle& bundle, const std::string& expert,
                       GatherStats* stats) {
    auto it = bundle.indices.find(expert);
    if (it == bundle.indices.end())
        throw UsageError("unknown expert '" + expert + "'");
    const IndexTensor& idx = it->second;
    const std::size_t k = bundle.groups.size();

    Checkpoint out;
    out.name = expert;
    for (const auto& [layer, ref_t] : bundle.groups[0].layers) {
        auto lit = idx.find(layer);
        if (lit == idx.end())
            throw BundleError("expert '" + expert + "' has no indices for layer '" +
                              layer + "'");
        const std::vector<std::uint32_t>& rows_idx = lit->second;
        if (rows_idx.size() != ref_t.rows)
            throw BundleError("index tensor for layer '" + layer + "' has wrong length");

        Tensor2D t(ref_t.rows, ref_t.cols);
        t.from_rank1 = ref_t.from_rank1;
        for (std::size_t ch = 0; ch < ref_t.rows; ++ch) {
            const std::uint32_t g = rows_idx[ch];
            if (g >= k)
                throw BundleError("index " + std::to_string(g) + " out of range for " +
                                  std::to_string(k) + " groups (layer '" + layer + "')");
            std::memcpy(t.row(ch), bundle.groups[g].layers.at(layer).row(ch),
                        ref_t.cols * sizeof(float));
            if (stats) stats->element_copies += ref_t.cols;
        }
        out.layers.emplace(layer, std::move(t));
    }
    return out;
}

StorageReport storage_report(const MergedBundle& bundle) {
    validate_bundle(bundle);
    const std::size_t k = bundle.groups.size();
    const std::size_t n = bundle.manifest.experts.size();
    const std::size_t psi = bundle.groups[0].param_count();
    const std::size_t channels = bundle.groups[0].channel_count();

    StorageReport rep;
    rep.weight_params = k * psi;
    rep.index_entries = n * channels;
    rep.ensemble_params = n * psi;
    rep.weight_ratio = static_cast<double>(k) / static_cast<double>(n);
    const double weight_bytes = static_cast<double>(rep.weight_params) * 4.0;
    const double index_bytes = static_cast<double>(rep.index_entries) * 4.0;
    const double ensemble_bytes = static_cast<double>(rep.ensemble_params) * 4.0;
    rep.total_ratio = (weight_bytes + index_bytes) / ensemble_bytes;
    return rep;
}

} // namespace cm

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cm/errors.hpp"
#include "cm/kernels.hpp"
#include "cm/merge.hpp"
#include "cm/tensor_io.hpp"

#include "test_support.hpp"

#include <cstring>
#include <limits>

using namespace cm;

namespace {

DeltaSet quantized_deltas(std::size_t n_experts, const std::vector<ts::LayerShape>& shapes,
                          std::uint64_t seed) {
    SplitMix64 rng(seed);
    DeltaSet ds;
    ds.base = ts::make_checkpoint("base", shapes, rng);
    ds.prune.kind = PruneKind::none;
    for (std::size_t e = 0; e < n_experts; ++e) {
        const std::string name = "expert" + std::to_string(e);
        ds.deltas.emplace(name,
                          compute_delta(ds.base, ts::make_checkpoint(name, shapes, rng)));
    }
    return ds;
}

MergeSpec spec_of(std::size_t k, double lambda, Granularity g = Granularity::channel) {
    MergeSpec spec;
    spec.lambda = lambda;
    spec.prune.kind = PruneKind::none;
    spec.cluster.k = k;
    spec.cluster.granularity = g;
    return spec;
}

// An identity table: expert e -> group e at every channel.
AssignmentTable identity_table(const DeltaSet& ds) {
    AssignmentTable t;
    t.granularity = Granularity::channel;
    t.n_experts = ds.expert_count();
    t.k = ds.expert_count();
    for (const auto& [lname, tensor] : ds.base.layers) {
        std::vector<std::uint32_t> labels(tensor.rows * t.n_experts);
        for (std::size_t ch = 0; ch < tensor.rows; ++ch)
            for (std::size_t e = 0; e < t.n_experts; ++e)
                labels[ch * t.n_experts + e] = std::uint32_t(e);
        t.per_layer.emplace(lname, std::move(labels));
    }
    return t;
}

} // namespace

TEST_CASE("single-channel merge follows base + lambda * delta sum") {
    // Base row [1, 0], one expert with delta [4, 4], lambda 0.5 -> [3, 2].
    DeltaSet ds;
    Tensor2D base_t(1, 2);
    base_t.data = {1.0f, 0.0f};
    ds.base.layers.emplace("w", base_t);
    Checkpoint d;
    Tensor2D dt(1, 2);
    dt.data = {4.0f, 4.0f};
    d.layers.emplace("w", dt);
    ds.deltas.emplace("e", std::move(d));

    AssignmentTable table;
    table.granularity = Granularity::channel;
    table.n_experts = 1;
    table.k = 1;
    table.per_layer.emplace("w", std::vector<std::uint32_t>{0});

    const MergedBundle bundle = merge(ds, table, spec_of(1, 0.5));
    CHECK(bundle.groups[0].layers.at("w").data == std::vector<float>{3.0f, 2.0f});
    CHECK(bundle.indices.at("e").at("w") == std::vector<std::uint32_t>{0});
}

TEST_CASE("identity assignment with lambda=1 reproduces every expert bitwise") {
    const DeltaSet ds = quantized_deltas(3, ts::small_shapes(), 2024);
    const MergedBundle bundle = merge(ds, identity_table(ds), spec_of(3, 1.0));
    SplitMix64 rng(2024);
    const Checkpoint base = ts::make_checkpoint("base", ts::small_shapes(), rng);
    for (std::size_t e = 0; e < 3; ++e) {
        const std::string name = "expert" + std::to_string(e);
        const Checkpoint expert = ts::make_checkpoint(name, ts::small_shapes(), rng);
        GatherStats stats;
        const Checkpoint got = reconstruct(bundle, name, &stats);
        CHECK(bitwise_equal(got, expert));
        CHECK(stats.element_copies == expert.param_count());
    }
}

TEST_CASE("K=1 merge equals the direct fixed-order formula bitwise") {
    const DeltaSet ds = quantized_deltas(4, ts::small_shapes(), 7);
    MergeSpec spec = spec_of(1, 0.5);
    AssignmentTable table;
    table.granularity = Granularity::channel;
    table.n_experts = 4;
    table.k = 1;
    for (const auto& [lname, t] : ds.base.layers)
        table.per_layer.emplace(lname, std::vector<std::uint32_t>(t.rows * 4, 0));

    const MergedBundle bundle = merge(ds, table, spec);

    // Independent oracle straight from the documented arithmetic: sum the
    // member deltas elementwise in expert order (plain float adds), then
    // base + lambda * sum with the product rounded before the add.
    for (const auto& [lname, bt] : ds.base.layers) {
        std::vector<float> sum(bt.size(), 0.0f);
        bool first = true;
        for (const auto& [ename, d] : ds.deltas) {
            const auto& dd = d.layers.at(lname).data;
            for (std::size_t i = 0; i < sum.size(); ++i)
                sum[i] = first ? dd[i] : sum[i] + dd[i];
            first = false;
        }
        std::vector<float> want(bt.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            const float scaled = float(spec.lambda) * sum[i];
            want[i] = bt.data[i] + scaled;
        }
        const auto& got = bundle.groups[0].layers.at(lname).data;
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(std::memcmp(&got[i], &want[i], 4) == 0);
    }

    // Every expert reconstructs to the same single group.
    const Checkpoint r0 = reconstruct(bundle, "expert0");
    for (int e = 1; e < 4; ++e)
        CHECK(bitwise_equal(r0, reconstruct(bundle, "expert" + std::to_string(e))));
}

TEST_CASE("all-zero deltas leave every group at the base bitwise") {
    SplitMix64 rng(31);
    DeltaSet ds;
    ds.base = ts::make_checkpoint("base", ts::small_shapes(), rng);
    for (const char* name : {"a", "b"}) {
        Checkpoint z;
        for (const auto& [lname, t] : ds.base.layers)
            z.layers.emplace(lname, Tensor2D(t.rows, t.cols));
        for (auto& [lname, t] : z.layers)
            t.from_rank1 = ds.base.layers.at(lname).from_rank1;
        ds.deltas.emplace(name, std::move(z));
    }
    ClusterSpec cs;
    cs.k = 2;
    const AssignmentTable table = build_assignments(ds, cs);
    const MergedBundle bundle = merge(ds, table, spec_of(2, 0.5));
    for (const auto& g : bundle.groups)
        for (const auto& [lname, t] : g.layers)
            CHECK(bitwise_equal(t, ds.base.layers.at(lname)));
}

TEST_CASE("channels with no members keep the exact base row") {
    // Two experts, K=2, but both experts assigned to group 0 at channel 0:
    // group 1's channel-0 row must be the base row bitwise (including -0.0).
    DeltaSet ds;
    Tensor2D base_t(2, 2);
    base_t.data = {-0.0f, 1.5f, 2.0f, -3.0f};
    ds.base.layers.emplace("w", base_t);
    for (const char* name : {"a", "b"}) {
        Checkpoint d;
        Tensor2D dt(2, 2);
        dt.data = {1.0f, 1.0f, 1.0f, 1.0f};
        d.layers.emplace("w", dt);
        ds.deltas.emplace(name, std::move(d));
    }
    AssignmentTable table;
    table.granularity = Granularity::channel;
    table.n_experts = 2;
    table.k = 2;
    // channel 0: both -> group 0; channel 1: a -> 0, b -> 1.
    table.per_layer.emplace("w", std::vector<std::uint32_t>{0, 0, 0, 1});

    const MergedBundle bundle = merge(ds, table, spec_of(2, 0.5));
    const auto& g1 = bundle.groups[1].layers.at("w");
    CHECK(std::memcmp(g1.row(0), base_t.row(0), 2 * sizeof(float)) == 0);
    // Sign of zero preserved exactly.
    std::uint32_t bits;
    std::memcpy(&bits, g1.row(0), 4);
    CHECK(bits == 0x80000000u);
}

TEST_CASE("merge output is independent of thread count and kernel backend") {
    const DeltaSet ds = quantized_deltas(4, {{"a.w", 16, 12}, {"b.w", 7, 9}}, 99);
    MergeSpec spec = spec_of(2, 0.5);
    spec.cluster.seed = 11;
    const AssignmentTable table = build_assignments(ds, spec.cluster, 1);
    const MergedBundle m1 = merge(ds, table, spec, 1);
    const MergedBundle m8 = merge(ds, table, spec, 8);
    REQUIRE(m1.groups.size() == m8.groups.size());
    for (std::size_t g = 0; g < m1.groups.size(); ++g)
        CHECK(bitwise_equal(m1.groups[g], m8.groups[g]));
    CHECK(m1.indices == m8.indices);
    CHECK(m1.manifest == m8.manifest);

    const kern::Isa before = kern::active_isa();
    for (kern::Isa isa : kern::available_isas()) {
        kern::force_isa(isa);
        const AssignmentTable t2 = build_assignments(ds, spec.cluster, 2);
        CHECK(t2.per_layer == table.per_layer);
        const MergedBundle m = merge(ds, t2, spec, 3);
        for (std::size_t g = 0; g < m1.groups.size(); ++g)
            CHECK(bitwise_equal(m.groups[g], m1.groups[g]));
    }
    kern::force_isa(before);
}

TEST_CASE("merge fills the manifest with experts, spec, and base hash") {
    const DeltaSet ds = quantized_deltas(3, ts::small_shapes(), 5);
    MergeSpec spec = spec_of(2, 0.25);
    spec.cluster.seed = 77;
    const AssignmentTable table = build_assignments(ds, spec.cluster);
    const MergedBundle bundle = merge(ds, table, spec);
    CHECK(bundle.manifest.experts == std::vector<std::string>{"expert0", "expert1", "expert2"});
    CHECK(bundle.manifest.spec == spec);
    CHECK(bundle.manifest.base_sha256 == checkpoint_sha256(ds.base));
    CHECK(bundle.manifest.format_version == 1);
}

TEST_CASE("reconstruct validates expert name and index range") {
    const DeltaSet ds = quantized_deltas(2, ts::small_shapes(), 15);
    MergeSpec spec = spec_of(2, 0.5);
    const AssignmentTable table = build_assignments(ds, spec.cluster);
    MergedBundle bundle = merge(ds, table, spec);
    CHECK_THROWS_AS(reconstruct(bundle, "nobody"), UsageError);
    bundle.indices.at("expert0").at("attn.w")[0] = 9;
    CHECK_THROWS_AS(reconstruct(bundle, "expert0"), BundleError);
}

TEST_CASE("merge rejects inconsistent inputs") {
    const DeltaSet ds = quantized_deltas(2, ts::small_shapes(), 1);
    MergeSpec spec = spec_of(2, 0.5);
    const AssignmentTable table = build_assignments(ds, spec.cluster);

    SUBCASE("k larger than expert count") {
        CHECK_THROWS_AS(merge(ds, table, spec_of(3, 0.5)), UsageError);
    }
    SUBCASE("table expert count mismatch") {
        DeltaSet bigger = quantized_deltas(3, ts::small_shapes(), 1);
        CHECK_THROWS_AS(merge(bigger, table, spec_of(2, 0.5)), DataError);
    }
    SUBCASE("table k mismatch") {
        MergeSpec wrong = spec_of(2, 0.5);
        wrong.cluster.k = 1;
        CHECK_THROWS_AS(merge(ds, table, wrong), DataError);
    }
    SUBCASE("label out of range") {
        AssignmentTable bad = table;
        bad.per_layer.at("mlp.w")[0] = 7;
        CHECK_THROWS_AS(merge(ds, bad, spec), DataError);
    }
    SUBCASE("nonfinite lambda") {
        MergeSpec bad = spec_of(2, std::numeric_limits<double>::infinity());
        CHECK_THROWS_AS(merge(ds, table, bad), UsageError);
    }
}

TEST_CASE("storage report does the arithmetic from the bundle shapes") {
    // N=4, K=2, psi=1000 (10 channels x 100 inputs) -> weight_ratio 0.5,
    // index entries 40, total ratio (2*1000*4 + 40*4) / (4*1000*4) = 0.51.
    const DeltaSet ds = quantized_deltas(4, {{"w", 10, 100}}, 3);
    MergeSpec spec = spec_of(2, 0.5);
    const AssignmentTable table = build_assignments(ds, spec.cluster);
    const MergedBundle bundle = merge(ds, table, spec);
    const StorageReport rep = storage_report(bundle);
    CHECK(rep.weight_params == 2000);
    CHECK(rep.index_entries == 40);
    CHECK(rep.ensemble_params == 4000);
    CHECK(rep.weight_ratio == 0.5);
    CHECK(rep.total_ratio == doctest::Approx(0.51).epsilon(1e-12));
}

TEST_CASE("layer and model granularity merges reconstruct consistently") {
    const DeltaSet ds = quantized_deltas(3, ts::small_shapes(), 88);
    for (Granularity g : {Granularity::layer, Granularity::model}) {
        CAPTURE(to_string(g));
        MergeSpec spec = spec_of(2, 1.0, g);
        spec.cluster.seed = 4;
        const AssignmentTable table = build_assignments(ds, spec.cluster);
        const MergedBundle bundle = merge(ds, table, spec);
        // With lambda=1 and quantized values, an expert alone in its group
        // at some layer reconstructs that layer exactly.
        for (const auto& [ename, d] : ds.deltas) {
            const Checkpoint rec = reconstruct(bundle, ename);
            for (const auto& [lname, t] : rec.layers) {
                // Count members of this expert's group at this layer.
                std::size_t members = 0;
                std::size_t eidx = 0, self = 0;
                for (const auto& [other, od] : ds.deltas) {
                    if (other == ename) self = eidx;
                    ++eidx;
                }
                const std::uint32_t mygroup = table.label(lname, 0, self);
                for (std::size_t e2 = 0; e2 < 3; ++e2)
                    members += (table.label(lname, 0, e2) == mygroup);
                if (members == 1) {
                    std::vector<float> want(t.size());
                    const auto& bt = ds.base.layers.at(lname);
                    const auto& dd = d.layers.at(lname).data;
                    for (std::size_t i = 0; i < want.size(); ++i) {
                        const float scaled = 1.0f * dd[i];
                        want[i] = bt.data[i] + scaled;
                    }
                    CHECK(std::memcmp(t.data.data(), want.data(), want.size() * 4) == 0);
                }
            }
        }
    }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cm/analysis.hpp"
#include "cm/bundle.hpp"
#include "cm/tensor_io.hpp"

#include "test_support.hpp"

#include <nlohmann/json.hpp>
#include <string>

using namespace cm;
using nlohmann::json;

namespace {

// Base + three expert files on disk, with distinct quantized deltas.
struct Fixture {
    ts::TempDir dir;
    std::string base_path;
    std::vector<std::string> expert_paths;
    std::vector<std::string> expert_names = {"law", "math", "med"};

    Fixture() {
        SplitMix64 rng(0xF1);
        const Checkpoint base = ts::make_checkpoint("base", ts::small_shapes(), rng);
        base_path = dir.str("base.safetensors");
        write_tensor_file(base, base_path);
        for (const std::string& name : expert_names) {
            const Checkpoint e = ts::make_checkpoint(name, ts::small_shapes(), rng);
            const std::string p = dir.str(name + ".safetensors");
            write_tensor_file(e, p);
            expert_paths.push_back(p);
        }
    }

    std::string expert_flags() const {
        std::string s;
        for (std::size_t i = 0; i < expert_names.size(); ++i)
            s += " --expert " + expert_names[i] + "=" + expert_paths[i];
        return s;
    }
};

} // namespace

TEST_CASE("help exits zero, parse errors exit two") {
    ts::TempDir scratch;
    CHECK(ts::run_cli("--help", scratch).exit_code == 0);
    CHECK(ts::run_cli("merge --help", scratch).exit_code == 0);

    const ts::CliResult bad = ts::run_cli("frobnicate", scratch);
    CHECK(bad.exit_code == 2);
    CHECK(bad.err.find("error: usage:") != std::string::npos);

    const ts::CliResult noargs = ts::run_cli("", scratch);
    CHECK(noargs.exit_code == 2);
}

TEST_CASE("merge writes a bundle and prints the storage report") {
    Fixture fx;
    const std::string out = fx.dir.str("bundle");
    const ts::CliResult res = ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() +
                                              " --out " + out + " --seed 7",
                                          fx.dir);
    REQUIRE_MESSAGE(res.exit_code == 0, res.err);
    CHECK(res.out.find("weight_params=") != std::string::npos);
    CHECK(res.out.find("weight_ratio=") != std::string::npos);
    CHECK(res.out.find("total_ratio=") != std::string::npos);

    const MergedBundle bundle = load_bundle(out);
    CHECK(bundle.manifest.experts == fx.expert_names);
    // Documented defaults: k=2, lambda=0.5, dare 0.3 with rescale, kmeans
    // cosine at channel granularity, 8 restarts, 100 iteration cap.
    CHECK(bundle.manifest.spec.cluster.k == 2);
    CHECK(bundle.manifest.spec.lambda == 0.5);
    CHECK(bundle.manifest.spec.prune.kind == PruneKind::dare);
    CHECK(bundle.manifest.spec.prune.ratio == 0.3);
    CHECK(bundle.manifest.spec.prune.rescale);
    CHECK(bundle.manifest.spec.cluster.strategy == Strategy::kmeans);
    CHECK(bundle.manifest.spec.cluster.metric == Metric::cosine);
    CHECK(bundle.manifest.spec.cluster.granularity == Granularity::channel);
    CHECK(bundle.manifest.spec.cluster.restarts == 8);
    CHECK(bundle.manifest.spec.cluster.max_iters == 100);
    CHECK(bundle.manifest.spec.cluster.seed == 7);
}

TEST_CASE("usage, data, and bundle failures map to exit codes 2, 3, 4") {
    Fixture fx;
    const std::string out = fx.dir.str("bundle");

    // k larger than the expert count -> usage error.
    const ts::CliResult usage = ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() +
                                                " --out " + out + " --k 5",
                                            fx.dir);
    CHECK(usage.exit_code == 2);
    CHECK(usage.err.find("error: usage:") == 0);

    // Unreadable expert file -> data error.
    const ts::CliResult data = ts::run_cli("merge --base " + fx.base_path +
                                               " --expert ghost=" + fx.dir.str("ghost.st") +
                                               " --expert law=" + fx.expert_paths[0] +
                                               " --out " + out,
                                           fx.dir);
    CHECK(data.exit_code == 3);
    CHECK(data.err.find("error: data:") == 0);

    // Damaged bundle -> bundle error.
    const ts::CliResult ok = ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() +
                                             " --out " + out,
                                         fx.dir);
    REQUIRE(ok.exit_code == 0);
    std::filesystem::remove(std::filesystem::path(out) / "group_1.safetensors");
    const ts::CliResult bundle = ts::run_cli(
        "reconstruct --bundle " + out + " --expert law --out " + fx.dir.str("r.st"), fx.dir);
    CHECK(bundle.exit_code == 4);
    CHECK(bundle.err.find("error: bundle:") == 0);
}

TEST_CASE("a manifest fed back as config reproduces the bundle byte for byte") {
    Fixture fx;
    const std::string out1 = fx.dir.str("bundle1");
    const std::string out2 = fx.dir.str("bundle2");
    const ts::CliResult first =
        ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() + " --out " + out1 +
                        " --k 2 --lambda 0.25 --prune-kind ties --prune-ratio 0.4" +
                        " --metric euclidean --granularity layer --seed 99",
                    fx.dir);
    REQUIRE_MESSAGE(first.exit_code == 0, first.err);

    const ts::CliResult second =
        ts::run_cli("merge --config " + out1 + "/manifest.json --base " + fx.base_path +
                        fx.expert_flags() + " --out " + out2,
                    fx.dir);
    REQUIRE_MESSAGE(second.exit_code == 0, second.err);
    CHECK(ts::same_dir_bytes(out1, out2));
}

TEST_CASE("config files drive merges; flags override them") {
    Fixture fx;
    json cfg;
    cfg["base"] = fx.base_path;
    json experts = json::object();
    for (std::size_t i = 0; i < fx.expert_names.size(); ++i)
        experts[fx.expert_names[i]] = fx.expert_paths[i];
    cfg["experts"] = experts;
    cfg["out"] = fx.dir.str("bundle_cfg");
    cfg["k"] = 2;
    cfg["lambda"] = 1.0;
    cfg["seed"] = 5;
    const std::string cfg_path = fx.dir.str("run.json");
    ts::write_file(cfg_path, cfg.dump());

    const ts::CliResult plain = ts::run_cli("merge --config " + cfg_path, fx.dir);
    REQUIRE_MESSAGE(plain.exit_code == 0, plain.err);
    const Manifest m1 =
        manifest_from_json(ts::read_file(fx.dir.str("bundle_cfg") + "/manifest.json"));
    CHECK(m1.spec.cluster.k == 2);
    CHECK(m1.spec.lambda == 1.0);
    CHECK(m1.spec.cluster.seed == 5);

    const ts::CliResult overridden = ts::run_cli(
        "merge --config " + cfg_path + " --k 3 --out " + fx.dir.str("bundle_ovr"), fx.dir);
    REQUIRE_MESSAGE(overridden.exit_code == 0, overridden.err);
    const Manifest m2 =
        manifest_from_json(ts::read_file(fx.dir.str("bundle_ovr") + "/manifest.json"));
    CHECK(m2.spec.cluster.k == 3);
    CHECK(m2.spec.lambda == 1.0); // untouched config value still applies

    // base_sha256 in the config is verified against the actual base file.
    cfg["base_sha256"] = std::string(64, '0');
    cfg["out"] = fx.dir.str("bundle_hash");
    ts::write_file(cfg_path, cfg.dump());
    const ts::CliResult mismatch = ts::run_cli("merge --config " + cfg_path, fx.dir);
    CHECK(mismatch.exit_code == 3);
    CHECK(mismatch.err.find("hash mismatch") != std::string::npos);

    // Unknown config fields are rejected.
    cfg.erase("base_sha256");
    cfg["lamda"] = 0.5;
    ts::write_file(cfg_path, cfg.dump());
    CHECK(ts::run_cli("merge --config " + cfg_path, fx.dir).exit_code == 2);
}

TEST_CASE("seed resolution: flag beats config beats CM_SEED beats zero") {
    Fixture fx;
    auto seed_of = [&](const std::string& args, const std::string& env,
                       const std::string& out) {
        const ts::CliResult res = ts::run_cli("merge --base " + fx.base_path +
                                                  fx.expert_flags() + " --out " +
                                                  fx.dir.str(out) + args,
                                              fx.dir, env);
        REQUIRE_MESSAGE(res.exit_code == 0, res.err);
        return manifest_from_json(ts::read_file(fx.dir.str(out) + "/manifest.json"))
            .spec.cluster.seed;
    };
    CHECK(seed_of("", "", "b0") == 0);
    CHECK(seed_of("", "CM_SEED=123 ", "b1") == 123);
    CHECK(seed_of(" --seed 9", "CM_SEED=123 ", "b2") == 9);

    json cfg;
    cfg["seed"] = 55;
    ts::write_file(fx.dir.str("seed.json"), cfg.dump());
    CHECK(seed_of(" --config " + fx.dir.str("seed.json"), "CM_SEED=123 ", "b3") == 55);

    const ts::CliResult bad = ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() +
                                              " --out " + fx.dir.str("b4"),
                                          fx.dir, "CM_SEED=notanumber ");
    CHECK(bad.exit_code == 2);
}

TEST_CASE("reconstruct rebuilds an expert bitwise when k equals n") {
    Fixture fx;
    const std::string out = fx.dir.str("bundle");
    // k = n with lambda 1 and no pruning: every expert is alone in its
    // cluster, so reconstruction must reproduce the original file exactly.
    // Euclidean, because cosine collapses 1-wide layers (every scalar row
    // normalizes to +-1) and distinct deltas could then share a cluster.
    const ts::CliResult merged =
        ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() + " --out " + out +
                        " --k 3 --lambda 1.0 --prune-kind none --metric euclidean",
                    fx.dir);
    REQUIRE_MESSAGE(merged.exit_code == 0, merged.err);

    for (std::size_t i = 0; i < fx.expert_names.size(); ++i) {
        const std::string rec = fx.dir.str("rec_" + fx.expert_names[i] + ".safetensors");
        const ts::CliResult res = ts::run_cli("reconstruct --bundle " + out + " --expert " +
                                                  fx.expert_names[i] + " --out " + rec,
                                              fx.dir);
        REQUIRE_MESSAGE(res.exit_code == 0, res.err);
        CHECK(res.out.find("lookup_seconds=") != std::string::npos);
        CHECK(res.out.find("layer_count=3") != std::string::npos);
        CHECK(ts::read_file(rec) == ts::read_file(fx.expert_paths[i]));
    }

    const ts::CliResult unknown = ts::run_cli(
        "reconstruct --bundle " + out + " --expert nobody --out " + fx.dir.str("x.st"), fx.dir);
    CHECK(unknown.exit_code == 2);
}

TEST_CASE("merge bytes are identical across thread counts") {
    Fixture fx;
    const std::string a = fx.dir.str("threads1");
    const std::string b = fx.dir.str("threads8");
    const std::string common = "merge --base " + fx.base_path + fx.expert_flags() +
                               " --seed 31 --prune-kind dare --prune-ratio 0.2";
    REQUIRE(ts::run_cli(common + " --out " + a + " --threads 1", fx.dir).exit_code == 0);
    REQUIRE(ts::run_cli(common + " --out " + b + " --threads 8", fx.dir).exit_code == 0);
    CHECK(ts::same_dir_bytes(a, b));
}

TEST_CASE("analyze storage and overlap report on a bundle") {
    Fixture fx;
    const std::string out = fx.dir.str("bundle");
    REQUIRE(ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() + " --out " + out,
                        fx.dir)
                .exit_code == 0);

    const ts::CliResult storage = ts::run_cli("analyze storage --bundle " + out, fx.dir);
    CHECK(storage.exit_code == 0);
    CHECK(storage.out.find("weight_ratio=0.66666666666666") != std::string::npos); // 2/3

    const std::string csv = fx.dir.str("overlap.csv");
    const ts::CliResult overlap =
        ts::run_cli("analyze overlap --bundle " + out + " --out " + csv, fx.dir);
    CHECK(overlap.exit_code == 0);
    const OverlapMatrix m = overlap_from_csv(ts::read_file(csv));
    REQUIRE(m.experts == fx.expert_names);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(m.at(i, i) == 1.0);
        for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == m.at(j, i));
    }
}

TEST_CASE("analyze similarity writes proportions that sum to one") {
    Fixture fx;
    const std::string csv = fx.dir.str("sim.csv");
    const ts::CliResult res =
        ts::run_cli("analyze similarity --base " + fx.base_path + " --reference " +
                        fx.expert_paths[0] + " --candidate law=" + fx.expert_paths[0] +
                        " --candidate math=" + fx.expert_paths[1] + " --out " + csv,
                    fx.dir);
    REQUIRE_MESSAGE(res.exit_code == 0, res.err);
    const SimilarityReport rep = similarity_from_csv(ts::read_file(csv));
    CHECK(rep.use_deltas);
    REQUIRE(rep.candidates == std::vector<std::string>{"law", "math"});
    for (const auto& [layer, props] : rep.proportions) {
        double sum = 0.0;
        for (double p : props) sum += p;
        CHECK(sum == doctest::Approx(1.0));
        // The reference IS candidate "law", so law wins every channel.
        CHECK(props[0] == 1.0);
    }
}

TEST_CASE("router train and route pick the right class end to end") {
    ts::TempDir dir;
    std::string jsonl;
    const std::vector<std::pair<std::string, std::string>> vocab = {
        {"math", "integral theorem prime"},
        {"code", "pointer segfault mutex"},
        {"law", "statute plaintiff appeal"}};
    SplitMix64 rng(8);
    for (int i = 0; i < 120; ++i) {
        const auto& [label, words] = vocab[i % 3];
        json j;
        j["text"] = words + " sample" + std::to_string(rng.below(4));
        j["label"] = label;
        jsonl += j.dump() + "\n";
    }
    const std::string data = dir.str("train.jsonl");
    ts::write_file(data, jsonl);

    const std::string model = dir.str("router.safetensors");
    const ts::CliResult train = ts::run_cli(
        "router train --data " + data + " --out " + model + " --epochs 12 --seed 1", dir);
    REQUIRE_MESSAGE(train.exit_code == 0, train.err);
    CHECK(train.out.find("classes=3") != std::string::npos);
    CHECK(train.out.find("final_loss=") != std::string::npos);

    const ts::CliResult route = ts::run_cli(
        "router route --model " + model + " --query \"solve the integral theorem\"", dir);
    REQUIRE_MESSAGE(route.exit_code == 0, route.err);
    CHECK(route.out.find("chosen=math\n") != std::string::npos);
    CHECK(route.out.find("score:code=") != std::string::npos);

    // Empty query -> data error.
    const ts::CliResult empty =
        ts::run_cli("router route --model " + model + " --query \"\"", dir);
    CHECK(empty.exit_code == 3);
}

TEST_CASE("inspect dumps the manifest") {
    Fixture fx;
    const std::string out = fx.dir.str("bundle");
    REQUIRE(ts::run_cli("merge --base " + fx.base_path + fx.expert_flags() + " --out " + out +
                            " --seed 4",
                        fx.dir)
                .exit_code == 0);
    const ts::CliResult res = ts::run_cli("inspect --bundle " + out, fx.dir);
    REQUIRE(res.exit_code == 0);
    const json j = json::parse(res.out);
    CHECK(j.at("k") == 2);
    CHECK(j.at("seed") == 4);
    CHECK(j.at("experts") == json({"law", "math", "med"}));

    CHECK(ts::run_cli("inspect --bundle " + fx.dir.str("nope"), fx.dir).exit_code == 4);
}

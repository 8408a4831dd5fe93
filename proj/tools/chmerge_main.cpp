#include "cm/analysis.hpp"
#include "cm/bundle.hpp"
#include "cm/cluster.hpp"
#include "cm/delta.hpp"
#include "cm/errors.hpp"
#include "cm/merge.hpp"
#include "cm/router.hpp"
#include "cm/tensor_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

using nlohmann::json;

namespace {

// Effective merge configuration: config file values overridden by flags,
// seed falling back to CM_SEED. Mirrors the manifest one-to-one, so a
// manifest fed back as --config reproduces the run.
struct MergeRun {
    std::string base;
    std::map<std::string, std::string> experts; // name -> path
    std::string out;
    cm::MergeSpec spec;
    std::string expected_base_sha256; // verified when non-empty
};

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0' || errno != 0)
        throw cm::UsageError(what + " is not an unsigned integer: '" + s + "'");
    return v;
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("CM_SEED");
    if (!v) return std::nullopt;
    return parse_u64(v, "CM_SEED");
}

std::pair<std::string, std::string> split_name_path(const std::string& arg) {
    const std::size_t eq = arg.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == arg.size())
        throw cm::UsageError("expected name=path, got '" + arg + "'");
    return {arg.substr(0, eq), arg.substr(eq + 1)};
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cm::UsageError("cannot open config file '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw cm::UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

// Returns true when the config supplied a seed (seed priority is
// flag > config > CM_SEED > 0).
bool apply_config(MergeRun& run, const json& cfg) {
    static const std::set<std::string> known = {
        "format_version", "base", "experts", "out",  "k",          "lambda",
        "prune",          "cluster", "seed", "base_sha256"};
    for (const auto& [key, value] : cfg.items()) {
        (void)value;
        if (!known.count(key))
            throw cm::UsageError("unknown config field '" + key + "'");
    }
    try {
        if (cfg.contains("format_version") && cfg["format_version"].get<int>() != 1)
            throw cm::UsageError("unsupported config format_version");
        if (cfg.contains("base")) run.base = cfg["base"].get<std::string>();
        if (cfg.contains("out")) run.out = cfg["out"].get<std::string>();
        if (cfg.contains("experts")) {
            const json& e = cfg["experts"];
            if (e.is_object()) {
                for (const auto& [name, path] : e.items())
                    run.experts[name] = path.get<std::string>();
            } else if (e.is_array()) {
                // Manifest form: names only; paths must come from --expert.
                for (const auto& name : e)
                    run.experts.emplace(name.get<std::string>(), std::string());
            } else {
                throw cm::UsageError("config 'experts' must be a map or an array of names");
            }
        }
        if (cfg.contains("k")) run.spec.cluster.k = cfg["k"].get<std::size_t>();
        if (cfg.contains("lambda")) run.spec.lambda = cfg["lambda"].get<double>();
        if (cfg.contains("prune")) {
            const json& p = cfg["prune"];
            if (p.contains("kind"))
                run.spec.prune.kind = cm::prune_kind_from(p["kind"].get<std::string>());
            if (p.contains("ratio")) run.spec.prune.ratio = p["ratio"].get<double>();
            if (p.contains("rescale")) run.spec.prune.rescale = p["rescale"].get<bool>();
        }
        if (cfg.contains("cluster")) {
            const json& c = cfg["cluster"];
            if (c.contains("strategy"))
                run.spec.cluster.strategy = cm::strategy_from(c["strategy"].get<std::string>());
            if (c.contains("metric"))
                run.spec.cluster.metric = cm::metric_from(c["metric"].get<std::string>());
            if (c.contains("granularity"))
                run.spec.cluster.granularity =
                    cm::granularity_from(c["granularity"].get<std::string>());
            if (c.contains("restarts")) run.spec.cluster.restarts = c["restarts"].get<std::size_t>();
            if (c.contains("max_iters"))
                run.spec.cluster.max_iters = c["max_iters"].get<std::size_t>();
        }
        if (cfg.contains("seed")) run.spec.cluster.seed = cfg["seed"].get<std::uint64_t>();
        if (cfg.contains("base_sha256"))
            run.expected_base_sha256 = cfg["base_sha256"].get<std::string>();
        return cfg.contains("seed");
    } catch (const json::exception& e) {
        throw cm::UsageError(std::string("config field has wrong type: ") + e.what());
    } catch (const cm::DataError& e) {
        throw cm::UsageError(e.what());
    }
}

void print_storage(const cm::StorageReport& rep) {
    std::printf("weight_params=%zu\n", rep.weight_params);
    std::printf("index_entries=%zu\n", rep.index_entries);
    std::printf("ensemble_params=%zu\n", rep.ensemble_params);
    std::printf("weight_ratio=%.17g\n", rep.weight_ratio);
    std::printf("total_ratio=%.17g\n", rep.total_ratio);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw cm::DataError("cannot open '" + path + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw cm::DataError("failed writing '" + path + "'");
}

int run_merge(const MergeRun& run, unsigned threads) {
    if (run.base.empty()) throw cm::UsageError("missing base checkpoint (--base or config)");
    if (run.out.empty()) throw cm::UsageError("missing output directory (--out or config)");
    if (run.experts.empty()) throw cm::UsageError("no experts given (--expert or config)");
    for (const auto& [name, path] : run.experts)
        if (path.empty())
            throw cm::UsageError("no path for expert '" + name +
                                 "' (config named it without a path; add --expert " + name +
                                 "=<path>)");
    cm::validate(run.spec);
    if (run.spec.cluster.k > run.experts.size())
        throw cm::UsageError("k=" + std::to_string(run.spec.cluster.k) +
                             " exceeds the number of experts (" +
                             std::to_string(run.experts.size()) + ")");

    cm::DeltaSet deltas;
    deltas.base = cm::read_tensor_file(run.base);
    deltas.prune = run.spec.prune;
    if (!run.expected_base_sha256.empty()) {
        const std::string actual = cm::checkpoint_sha256(deltas.base);
        if (actual != run.expected_base_sha256)
            throw cm::DataError("base checkpoint hash mismatch: config expects " +
                                run.expected_base_sha256 + " but '" + run.base + "' hashes to " +
                                actual);
    }
    for (const auto& [name, path] : run.experts) {
        cm::Checkpoint expert = cm::read_tensor_file(path);
        expert.name = name;
        deltas.deltas.emplace(name, cm::compute_delta(deltas.base, expert, threads));
    }

    const cm::DeltaSet pruned = cm::apply_pruning(deltas, run.spec.cluster.seed, threads);
    const cm::AssignmentTable table = cm::build_assignments(pruned, run.spec.cluster, threads);
    const cm::MergedBundle bundle = cm::merge(pruned, table, run.spec, threads);
    cm::save_bundle(bundle, run.out);
    print_storage(cm::storage_report(bundle));
    return 0;
}

int run_reconstruct(const std::string& bundle_dir, const std::string& expert,
                    const std::string& out) {
    const cm::MergedBundle bundle = cm::load_bundle(bundle_dir);
    cm::GatherStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    const cm::Checkpoint ckpt = cm::reconstruct(bundle, expert, &stats);
    const auto t1 = std::chrono::steady_clock::now();
    cm::write_tensor_file(ckpt, out);
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    std::printf("lookup_seconds=%.6f layer_count=%zu param_count=%zu\n", secs,
                ckpt.layers.size(), stats.element_copies);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"channel-merging toolkit: merge expert checkpoints into K group "
                 "checkpoints with per-expert index lookup"};
    app.require_subcommand(1);
    unsigned threads = 1;
    app.add_option("--threads", threads, "worker thread cap (never changes output bytes)")
        ->capture_default_str();

    // merge
    auto* merge_cmd = app.add_subcommand("merge", "merge experts into a bundle");
    std::string cfg_path, base_path, out_path;
    std::vector<std::string> expert_args;
    std::uint64_t k_arg = 0, seed_arg = 0, restarts_arg = 0, iters_arg = 0;
    double lambda_arg = 0.0, ratio_arg = 0.0;
    std::string prune_arg, strategy_arg, metric_arg, granularity_arg;
    merge_cmd->add_option("--config", cfg_path, "JSON config (a manifest also works)");
    merge_cmd->add_option("--base", base_path, "base checkpoint file");
    merge_cmd->add_option("--expert", expert_args, "expert as name=path (repeatable)");
    merge_cmd->add_option("--out", out_path, "output bundle directory");
    merge_cmd->add_option("--k", k_arg, "number of groups");
    merge_cmd->add_option("--lambda", lambda_arg, "delta scaling factor");
    merge_cmd->add_option("--prune-kind", prune_arg, "none|dare|ties");
    merge_cmd->add_option("--prune-ratio", ratio_arg, "prune ratio in [0,1)");
    auto* rescale_flag = merge_cmd->add_flag("--rescale,!--no-rescale",
                                             "rescale DARE survivors by 1/(1-p)");
    merge_cmd->add_option("--strategy", strategy_arg, "kmeans|random|sign");
    merge_cmd->add_option("--metric", metric_arg, "cosine|euclidean|manhattan");
    merge_cmd->add_option("--granularity", granularity_arg, "channel|layer|model");
    merge_cmd->add_option("--restarts", restarts_arg, "k-means restarts");
    merge_cmd->add_option("--max-iters", iters_arg, "k-means iteration cap");
    auto* seed_opt = merge_cmd->add_option("--seed", seed_arg, "RNG seed");

    // reconstruct
    auto* rec_cmd = app.add_subcommand("reconstruct", "rebuild an expert from a bundle");
    std::string rec_bundle, rec_expert, rec_out;
    rec_cmd->add_option("--bundle", rec_bundle, "bundle directory")->required();
    rec_cmd->add_option("--expert", rec_expert, "expert name")->required();
    rec_cmd->add_option("--out", rec_out, "output checkpoint file")->required();

    // analyze
    auto* ana_cmd = app.add_subcommand("analyze", "similarity / overlap / storage reports");
    ana_cmd->require_subcommand(1);
    auto* sim_cmd = ana_cmd->add_subcommand("similarity", "per-channel winner proportions");
    std::string sim_base, sim_ref, sim_out;
    std::vector<std::string> sim_cands;
    bool sim_weights = false;
    sim_cmd->add_option("--base", sim_base, "base checkpoint")->required();
    sim_cmd->add_option("--reference", sim_ref, "reference checkpoint")->required();
    sim_cmd->add_option("--candidate", sim_cands, "candidate as name=path (repeatable)")
        ->required();
    sim_cmd->add_option("--out", sim_out, "output CSV path")->required();
    sim_cmd->add_flag("--weights", sim_weights, "compare raw weights instead of deltas");

    auto* ovl_cmd = ana_cmd->add_subcommand("overlap", "expert index-match fractions");
    std::string ovl_bundle, ovl_out;
    ovl_cmd->add_option("--bundle", ovl_bundle, "bundle directory")->required();
    ovl_cmd->add_option("--out", ovl_out, "output CSV path")->required();

    auto* sto_cmd = ana_cmd->add_subcommand("storage", "storage reduction report");
    std::string sto_bundle;
    sto_cmd->add_option("--bundle", sto_bundle, "bundle directory")->required();

    // router
    auto* router_cmd = app.add_subcommand("router", "train or query the expert router");
    router_cmd->require_subcommand(1);
    auto* rt_cmd = router_cmd->add_subcommand("train", "train on a JSONL corpus");
    std::string rt_data, rt_out;
    cm::TrainConfig rt_cfg;
    std::uint64_t rt_seed = 0, rt_hash_seed = 0;
    bool rt_no_bigrams = false, rt_no_lower = false;
    rt_cmd->add_option("--data", rt_data, "JSONL file with {\"text\",\"label\"}")->required();
    rt_cmd->add_option("--out", rt_out, "output model file")->required();
    rt_cmd->add_option("--lr", rt_cfg.lr, "learning rate")->capture_default_str();
    rt_cmd->add_option("--epochs", rt_cfg.epochs, "training epochs")->capture_default_str();
    rt_cmd->add_option("--batch", rt_cfg.batch, "mini-batch size")->capture_default_str();
    auto* rt_seed_opt = rt_cmd->add_option("--seed", rt_seed, "RNG seed");
    rt_cmd->add_option("--dim", rt_cfg.tok.dim, "feature dimension (power of two)")
        ->capture_default_str();
    rt_cmd->add_option("--hash-seed", rt_hash_seed, "token hash seed");
    rt_cmd->add_flag("--no-bigrams", rt_no_bigrams, "unigram features only");
    rt_cmd->add_flag("--no-lowercase", rt_no_lower, "keep ASCII case");

    auto* rq_cmd = router_cmd->add_subcommand("route", "score a query");
    std::string rq_model, rq_query;
    rq_cmd->add_option("--model", rq_model, "router model file")->required();
    rq_cmd->add_option("--query", rq_query, "query text")->required();

    // inspect
    auto* ins_cmd = app.add_subcommand("inspect", "dump a bundle manifest");
    std::string ins_bundle;
    ins_cmd->add_option("--bundle", ins_bundle, "bundle directory")->required();

    // Global flags like --threads may appear after the subcommand.
    for (CLI::App* sc : {merge_cmd, rec_cmd, ana_cmd, sim_cmd, ovl_cmd, sto_cmd, router_cmd,
                         rt_cmd, rq_cmd, ins_cmd})
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    }

    try {
        if (merge_cmd->parsed()) {
            MergeRun run;
            bool config_has_seed = false;
            if (!cfg_path.empty()) config_has_seed = apply_config(run, load_json_file(cfg_path));
            if (merge_cmd->count("--base")) run.base = base_path;
            if (merge_cmd->count("--out")) run.out = out_path;
            for (const std::string& arg : expert_args) {
                auto [name, path] = split_name_path(arg);
                run.experts[name] = path;
            }
            if (merge_cmd->count("--k")) run.spec.cluster.k = k_arg;
            if (merge_cmd->count("--lambda")) run.spec.lambda = lambda_arg;
            if (!prune_arg.empty()) run.spec.prune.kind = cm::prune_kind_from(prune_arg);
            if (merge_cmd->count("--prune-ratio")) run.spec.prune.ratio = ratio_arg;
            if (rescale_flag->count()) run.spec.prune.rescale = rescale_flag->as<bool>();
            if (!strategy_arg.empty())
                run.spec.cluster.strategy = cm::strategy_from(strategy_arg);
            if (!metric_arg.empty()) run.spec.cluster.metric = cm::metric_from(metric_arg);
            if (!granularity_arg.empty())
                run.spec.cluster.granularity = cm::granularity_from(granularity_arg);
            if (merge_cmd->count("--restarts")) run.spec.cluster.restarts = restarts_arg;
            if (merge_cmd->count("--max-iters")) run.spec.cluster.max_iters = iters_arg;
            if (seed_opt->count()) {
                run.spec.cluster.seed = seed_arg;
            } else if (!config_has_seed) {
                if (auto env = env_seed()) run.spec.cluster.seed = *env;
            }
            return run_merge(run, threads);
        }
        if (rec_cmd->parsed()) return run_reconstruct(rec_bundle, rec_expert, rec_out);
        if (sim_cmd->parsed()) {
            const cm::Checkpoint base = cm::read_tensor_file(sim_base);
            cm::Checkpoint ref = cm::read_tensor_file(sim_ref);
            std::vector<std::pair<std::string, cm::Checkpoint>> cands;
            for (const std::string& arg : sim_cands) {
                auto [name, path] = split_name_path(arg);
                cands.emplace_back(name, cm::read_tensor_file(path));
            }
            const cm::SimilarityReport rep =
                cm::similarity_proportions(base, ref, cands, !sim_weights, threads);
            write_text(sim_out, cm::similarity_csv(rep));
            return 0;
        }
        if (ovl_cmd->parsed()) {
            const cm::MergedBundle bundle = cm::load_bundle(ovl_bundle);
            write_text(ovl_out, cm::overlap_csv(cm::expert_overlap(bundle)));
            return 0;
        }
        if (sto_cmd->parsed()) {
            const cm::MergedBundle bundle = cm::load_bundle(sto_bundle);
            print_storage(cm::storage_report(bundle));
            return 0;
        }
        if (rt_cmd->parsed()) {
            rt_cfg.tok.bigrams = !rt_no_bigrams;
            rt_cfg.tok.lowercase = !rt_no_lower;
            rt_cfg.tok.hash_seed = rt_hash_seed;
            if (rt_seed_opt->count())
                rt_cfg.seed = rt_seed;
            else if (auto env = env_seed())
                rt_cfg.seed = *env;
            const std::vector<cm::LabeledQuery> data = cm::read_labeled_queries(rt_data);
            std::vector<double> losses;
            const cm::RouterModel model = cm::train_router(data, rt_cfg, &losses);
            cm::save_router(model, rt_out);
            std::printf("classes=%zu samples=%zu final_loss=%.17g\n", model.classes.size(),
                        data.size(), losses.empty() ? 0.0 : losses.back());
            return 0;
        }
        if (rq_cmd->parsed()) {
            const cm::RouterModel model = cm::load_router(rq_model);
            const cm::RouteResult res = cm::route(model, rq_query);
            std::printf("chosen=%s\n", res.chosen.c_str());
            for (std::size_t c = 0; c < model.classes.size(); ++c)
                std::printf("score:%s=%.17g\n", model.classes[c].c_str(), res.scores[c]);
            return 0;
        }
        if (ins_cmd->parsed()) {
            const std::filesystem::path mpath =
                std::filesystem::path(ins_bundle) / "manifest.json";
            std::ifstream in(mpath, std::ios::binary);
            if (!in) throw cm::BundleError("missing manifest.json in '" + ins_bundle + "'");
            std::string text((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
            std::fputs(cm::manifest_to_json(cm::manifest_from_json(text)).c_str(), stdout);
            return 0;
        }
    } catch (const cm::UsageError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    } catch (const cm::BundleError& e) {
        std::cerr << "error: bundle: " << e.what() << "\n";
        return 4;
    } catch (const cm::DataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#include "cm/bundle.hpp"

#include "cm/errors.hpp"
#include "cm/tensor_io.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <regex>
#include <set>

using nlohmann::json;

namespace cm {

std::string manifest_to_json(const Manifest& m) {
    json j;
    j["format_version"] = m.format_version;
    j["experts"] = m.experts;
    j["k"] = m.spec.cluster.k;
    j["lambda"] = m.spec.lambda;
    j["prune"] = {{"kind", to_string(m.spec.prune.kind)},
                  {"ratio", m.spec.prune.ratio},
                  {"rescale", m.spec.prune.rescale}};
    j["cluster"] = {{"strategy", to_string(m.spec.cluster.strategy)},
                    {"metric", to_string(m.spec.cluster.metric)},
                    {"granularity", to_string(m.spec.cluster.granularity)},
                    {"restarts", m.spec.cluster.restarts},
                    {"max_iters", m.spec.cluster.max_iters}};
    j["seed"] = m.spec.cluster.seed;
    j["base_sha256"] = m.base_sha256;
    return j.dump(2) + "\n";
}

namespace {

const json& field(const json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end())
        throw BundleError(std::string("manifest is missing field '") + name + "'");
    return *it;
}

} // namespace

Manifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw BundleError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!j.is_object())
        throw BundleError("manifest is not a JSON object");

    Manifest m;
    try {
        m.format_version = field(j, "format_version").get<int>();
        if (m.format_version != 1)
            throw BundleError("unsupported format_version " +
                              std::to_string(m.format_version));
        m.experts = field(j, "experts").get<std::vector<std::string>>();
        m.spec.cluster.k = field(j, "k").get<std::size_t>();
        m.spec.lambda = field(j, "lambda").get<double>();
        const json& prune = field(j, "prune");
        m.spec.prune.kind = prune_kind_from(field(prune, "kind").get<std::string>());
        m.spec.prune.ratio = field(prune, "ratio").get<double>();
        m.spec.prune.rescale = field(prune, "rescale").get<bool>();
        const json& cluster = field(j, "cluster");
        m.spec.cluster.strategy = strategy_from(field(cluster, "strategy").get<std::string>());
        m.spec.cluster.metric = metric_from(field(cluster, "metric").get<std::string>());
        m.spec.cluster.granularity =
            granularity_from(field(cluster, "granularity").get<std::string>());
        m.spec.cluster.restarts = field(cluster, "restarts").get<std::size_t>();
        m.spec.cluster.max_iters = field(cluster, "max_iters").get<std::size_t>();
        m.spec.cluster.seed = field(j, "seed").get<std::uint64_t>();
        m.base_sha256 = field(j, "base_sha256").get<std::string>();
    } catch (const json::exception& e) {
        throw BundleError(std::string("manifest field has wrong type: ") + e.what());
    } catch (const DataError& e) {
        throw BundleError(e.what());
    }
    return m;
}

void validate_bundle(const MergedBundle& bundle) {
    const std::size_t k = bundle.groups.size();
    const std::size_t n = bundle.manifest.experts.size();
    if (k < 1) throw BundleError("bundle has no group checkpoints");
    if (n < 1) throw BundleError("bundle names no experts");
    if (k > n)
        throw BundleError("bundle has " + std::to_string(k) + " groups but only " +
                          std::to_string(n) + " experts (K must not exceed N)");
    if (bundle.manifest.spec.cluster.k != k)
        throw BundleError("manifest k=" + std::to_string(bundle.manifest.spec.cluster.k) +
                          " but bundle holds " + std::to_string(k) + " group checkpoints");

    for (std::size_t i = 1; i < n; ++i)
        if (bundle.manifest.experts[i - 1] >= bundle.manifest.experts[i])
            throw BundleError("manifest experts are not sorted unique names");
    for (const std::string& e : bundle.manifest.experts)
        if (e.empty() || e.find('/') != std::string::npos)
            throw BundleError("expert name '" + e + "' is empty or contains '/'");

    const Checkpoint& ref = bundle.groups[0];
    if (ref.layers.empty()) throw BundleError("group checkpoints have no layers");
    for (std::size_t g = 1; g < k; ++g) {
        try {
            require_aligned(ref, bundle.groups[g]);
        } catch (const DataError& e) {
            throw BundleError(std::string("group checkpoints misaligned: ") + e.what());
        }
    }

    if (bundle.indices.size() != n)
        throw BundleError("bundle holds index tensors for " +
                          std::to_string(bundle.indices.size()) + " experts but manifest names " +
                          std::to_string(n));
    for (const std::string& expert : bundle.manifest.experts) {
        auto it = bundle.indices.find(expert);
        if (it == bundle.indices.end())
            throw BundleError("missing index tensor for expert '" + expert + "'");
        const IndexTensor& idx = it->second;
        if (idx.size() != ref.layers.size())
            throw BundleError("index tensor for expert '" + expert + "' covers " +
                              std::to_string(idx.size()) + " layers, expected " +
                              std::to_string(ref.layers.size()));
        for (const auto& [layer, t] : ref.layers) {
            auto lit = idx.find(layer);
            if (lit == idx.end())
                throw BundleError("expert '" + expert + "' has no indices for layer '" +
                                  layer + "'");
            if (lit->second.size() != t.rows)
                throw BundleError("expert '" + expert + "' layer '" + layer + "' has " +
                                  std::to_string(lit->second.size()) + " indices, expected " +
                                  std::to_string(t.rows));
            for (std::uint32_t v : lit->second)
                if (v >= k)
                    throw BundleError("expert '" + expert + "' layer '" + layer +
                                      "' references group " + std::to_string(v) +
                                      " but the bundle has only " + std::to_string(k) +
                                      " groups");
        }
    }
}

void save_bundle(const MergedBundle& bundle, const std::filesystem::path& dir) {
    validate_bundle(bundle);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw DataError("cannot create bundle directory '" + dir.string() +
                        "': " + ec.message());

    for (std::size_t g = 0; g < bundle.groups.size(); ++g)
        write_tensor_file(bundle.groups[g],
                          dir / ("group_" + std::to_string(g) + ".safetensors"));

    st::File idx_file;
    for (const auto& [expert, idx] : bundle.indices) {
        for (const auto& [layer, values] : idx) {
            st::RawTensor t;
            t.dtype = st::Dtype::u32;
            t.shape = {values.size(), 1};
            t.bytes.resize(values.size() * sizeof(std::uint32_t));
            std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
            idx_file.tensors.emplace(expert + "/" + layer, std::move(t));
        }
    }
    st::write_file(dir / "indices.safetensors", idx_file);

    const std::string manifest = manifest_to_json(bundle.manifest);
    const std::filesystem::path mpath = dir / "manifest.json";
    std::ofstream out(mpath, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + mpath.string() + "' for writing");
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    if (!out) throw DataError("failed writing '" + mpath.string() + "'");
}

MergedBundle load_bundle(const std::filesystem::path& dir) {
    const std::filesystem::path mpath = dir / "manifest.json";
    std::ifstream in(mpath, std::ios::binary);
    if (!in)
        throw BundleError("missing manifest.json in '" + dir.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    MergedBundle bundle;
    bundle.manifest = manifest_from_json(text);
    if (bundle.manifest.base_sha256.empty())
        throw BundleError("manifest base_sha256 is empty");

    const std::size_t k = bundle.manifest.spec.cluster.k;

    // The group files on disk must be exactly group_0 .. group_{k-1}.
    std::set<std::size_t> found;
    const std::regex group_re("group_([0-9]+)\\.safetensors");
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        std::smatch m;
        const std::string fname = entry.path().filename().string();
        if (std::regex_match(fname, m, group_re))
            found.insert(std::stoull(m[1].str()));
    }
    for (std::size_t g = 0; g < k; ++g)
        if (!found.count(g))
            throw BundleError("missing group file group_" + std::to_string(g) +
                              ".safetensors (manifest k=" + std::to_string(k) + ")");
    if (found.size() != k)
        throw BundleError("bundle holds " + std::to_string(found.size()) +
                          " group files but manifest k=" + std::to_string(k));

    try {
        for (std::size_t g = 0; g < k; ++g) {
            Checkpoint ckpt =
                read_tensor_file(dir / ("group_" + std::to_string(g) + ".safetensors"));
            ckpt.name = "group_" + std::to_string(g);
            bundle.groups.push_back(std::move(ckpt));
        }
    } catch (const DataError& e) {
        throw BundleError(std::string("corrupt group checkpoint: ") + e.what());
    }

    st::File idx_file;
    try {
        idx_file = st::read_file(dir / "indices.safetensors");
    } catch (const DataError& e) {
        throw BundleError(std::string("corrupt index file: ") + e.what());
    }
    for (const auto& [name, raw] : idx_file.tensors) {
        const std::size_t slash = name.find('/');
        if (slash == std::string::npos)
            throw BundleError("index tensor '" + name + "' is not named <expert>/<layer>");
        const std::string expert = name.substr(0, slash);
        const std::string layer = name.substr(slash + 1);
        if (raw.dtype != st::Dtype::u32)
            throw BundleError("index tensor '" + name + "' is not U32");
        if (raw.shape.size() != 2 || raw.shape[1] != 1)
            throw BundleError("index tensor '" + name + "' does not have shape [O, 1]");
        std::vector<std::uint32_t> values(raw.elem_count());
        std::memcpy(values.data(), raw.bytes.data(), raw.bytes.size());
        bundle.indices[expert].emplace(layer, std::move(values));
    }

    validate_bundle(bundle);
    return bundle;
}

} // namespace cm

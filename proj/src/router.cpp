#include "cm/router.hpp"

#include "cm/errors.hpp"
#include "cm/rng.hpp"
#include "cm/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

using nlohmann::json;

namespace cm {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

void check_tok(const TokenizerConfig& cfg) {
    if (cfg.dim < 2 || !is_power_of_two(cfg.dim))
        throw UsageError("feature dimension must be a power of two, at least 2");
}

// Unicode White_Space code points.
bool is_space(std::uint32_t cp) {
    switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D:
    case 0x20: case 0x85: case 0xA0: case 0x1680:
    case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
        return true;
    default:
        return cp >= 0x2000 && cp <= 0x200A;
    }
}

// Decodes the code point at s[i], advancing i. Bytes that are not valid
// UTF-8 are passed through as single-byte code points.
std::uint32_t next_codepoint(const std::string& s, std::size_t& i) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
        ++i;
        return c;
    }
    if ((c & 0xE0) == 0xC0) {
        len = 2;
        cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
        len = 3;
        cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
        len = 4;
        cp = c & 0x07;
    } else {
        ++i;
        return c;
    }
    if (i + len > s.size()) {
        ++i;
        return c;
    }
    for (std::size_t j = 1; j < len; ++j)
        if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80) {
            ++i;
            return c;
        }
    for (std::size_t j = 1; j < len; ++j)
        cp = (cp << 6) | (static_cast<unsigned char>(s[i + j]) & 0x3F);
    i += len;
    return cp;
}

std::vector<std::string> tokenize(const std::string& text, bool lowercase) {
    std::vector<std::string> tokens;
    std::string cur;
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t start = i;
        const std::uint32_t cp = next_codepoint(text, i);
        if (is_space(cp)) {
            if (!cur.empty()) tokens.push_back(std::move(cur));
            cur.clear();
            continue;
        }
        for (std::size_t j = start; j < i; ++j) {
            char ch = text[j];
            if (lowercase && ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

std::uint32_t hash_token(const std::string& token, const TokenizerConfig& cfg) {
    const std::uint64_t h = mix64(fnv1a64(token) ^ cfg.hash_seed);
    return static_cast<std::uint32_t>(h & (cfg.dim - 1));
}

} // namespace

SparseVec featurize(const std::string& text, const TokenizerConfig& cfg) {
    check_tok(cfg);
    const std::vector<std::string> tokens = tokenize(text, cfg.lowercase);
    if (tokens.empty()) throw DataError("empty query");

    std::map<std::uint32_t, float> counts;
    for (const std::string& t : tokens) counts[hash_token(t, cfg)] += 1.0f;
    if (cfg.bigrams)
        for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
            counts[hash_token(tokens[i] + '\x1F' + tokens[i + 1], cfg)] += 1.0f;

    double sumsq = 0.0;
    for (const auto& [idx, c] : counts) {
        (void)idx;
        sumsq += static_cast<double>(c) * static_cast<double>(c);
    }
    const double norm = std::sqrt(sumsq);
    SparseVec out;
    out.reserve(counts.size());
    for (const auto& [idx, c] : counts)
        out.emplace_back(idx, static_cast<float>(static_cast<double>(c) / norm));
    return out;
}

namespace {

// Class logits for one sample under the current parameters (double math).
std::vector<double> logits_of(const RouterModel& model, const SparseVec& x) {
    const std::size_t nc = model.classes.size();
    std::vector<double> z(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        double acc = static_cast<double>(model.bias[c]);
        const float* w = model.weights.row(c);
        for (const auto& [idx, v] : x)
            acc += static_cast<double>(w[idx]) * static_cast<double>(v);
        z[c] = acc;
    }
    return z;
}

std::vector<double> softmax(std::vector<double> z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double total = 0.0;
    for (double& v : z) {
        v = std::exp(v - mx);
        total += v;
    }
    for (double& v : z) v /= total;
    return z;
}

} // namespace

RouterModel train_router(const std::vector<LabeledQuery>& data, const TrainConfig& cfg,
                         std::vector<double>* epoch_loss) {
    if (data.empty()) throw DataError("empty training data");
    check_tok(cfg.tok);
    if (cfg.batch < 1) throw UsageError("batch size must be at least 1");
    if (cfg.epochs < 1) throw UsageError("epochs must be at least 1");

    std::set<std::string> label_set;
    for (const LabeledQuery& q : data) label_set.insert(q.label);
    if (label_set.size() < 2) throw DataError("training data has a single class");

    RouterModel model;
    model.tok = cfg.tok;
    model.classes.assign(label_set.begin(), label_set.end());
    const std::size_t nc = model.classes.size();
    model.weights = Tensor2D(nc, cfg.tok.dim);
    model.bias.assign(nc, 0.0f);

    std::map<std::string, std::size_t> class_of;
    for (std::size_t c = 0; c < nc; ++c) class_of[model.classes[c]] = c;

    std::vector<router_detail::Sample> samples;
    samples.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            samples.emplace_back(featurize(data[i].text, cfg.tok), class_of.at(data[i].label));
        } catch (const DataError& e) {
            throw DataError("training sample " + std::to_string(i) + ": " + e.what());
        }
    }

    const std::size_t m = samples.size();
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    SplitMix64 rng(cfg.seed);

    std::vector<std::vector<double>> batch_dl;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = m; i-- > 1;)
            std::swap(order[i], order[rng.below(i + 1)]);

        for (std::size_t start = 0; start < m; start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, m);
            const std::size_t bsz = stop - start;

            // d(logits) for the whole batch under the pre-update parameters,
            // then apply in a fixed order for bitwise reproducibility.
            batch_dl.assign(bsz, {});
            for (std::size_t s = 0; s < bsz; ++s) {
                const router_detail::Sample& sm = samples[order[start + s]];
                std::vector<double> p = softmax(logits_of(model, sm.first));
                p[sm.second] -= 1.0;
                batch_dl[s] = std::move(p);
            }
            const double scale = cfg.lr / static_cast<double>(bsz);
            for (std::size_t s = 0; s < bsz; ++s) {
                const router_detail::Sample& sm = samples[order[start + s]];
                for (std::size_t c = 0; c < nc; ++c) {
                    const double dl = batch_dl[s][c];
                    float* w = model.weights.row(c);
                    for (const auto& [idx, v] : sm.first)
                        w[idx] = static_cast<float>(static_cast<double>(w[idx]) -
                                                    scale * dl * static_cast<double>(v));
                    model.bias[c] = static_cast<float>(static_cast<double>(model.bias[c]) -
                                                       scale * dl);
                }
            }
        }
        if (epoch_loss) epoch_loss->push_back(router_detail::mean_loss(model, samples));
    }
    return model;
}

RouteResult route(const RouterModel& model, const std::string& query) {
    const SparseVec x = featurize(query, model.tok);
    RouteResult res;
    res.scores = softmax(logits_of(model, x));
    res.chosen_index = 0;
    for (std::size_t c = 1; c < res.scores.size(); ++c)
        if (res.scores[c] > res.scores[res.chosen_index]) res.chosen_index = c;
    res.chosen = model.classes[res.chosen_index];
    return res;
}

void save_router(const RouterModel& model, const std::filesystem::path& path) {
    const std::size_t nc = model.classes.size();
    if (nc < 2) throw DataError("router model has fewer than two classes");

    st::File f;
    st::RawTensor w;
    w.dtype = st::Dtype::f32;
    w.shape = {nc, model.tok.dim};
    w.bytes.resize(model.weights.data.size() * sizeof(float));
    std::memcpy(w.bytes.data(), model.weights.data.data(), w.bytes.size());
    f.tensors.emplace("weights", std::move(w));

    st::RawTensor b;
    b.dtype = st::Dtype::f32;
    b.shape = {nc};
    b.bytes.resize(model.bias.size() * sizeof(float));
    std::memcpy(b.bytes.data(), model.bias.data(), b.bytes.size());
    f.tensors.emplace("bias", std::move(b));

    f.metadata["format"] = "router-v1";
    f.metadata["classes"] = json(model.classes).dump();
    f.metadata["dim"] = std::to_string(model.tok.dim);
    f.metadata["lowercase"] = model.tok.lowercase ? "true" : "false";
    f.metadata["bigrams"] = model.tok.bigrams ? "true" : "false";
    f.metadata["hash_seed"] = std::to_string(model.tok.hash_seed);
    st::write_file(path, f);
}

RouterModel load_router(const std::filesystem::path& path) {
    const st::File f = st::read_file(path);
    const std::string origin = path.string();
    auto meta = [&](const char* key) -> const std::string& {
        auto it = f.metadata.find(key);
        if (it == f.metadata.end())
            throw DataError(origin + ": router model metadata is missing '" +
                            std::string(key) + "'");
        return it->second;
    };
    if (meta("format") != "router-v1")
        throw DataError(origin + ": not a router model file");

    RouterModel model;
    try {
        model.classes = json::parse(meta("classes")).get<std::vector<std::string>>();
        model.tok.dim = std::stoull(meta("dim"));
        model.tok.lowercase = meta("lowercase") == "true";
        model.tok.bigrams = meta("bigrams") == "true";
        model.tok.hash_seed = std::stoull(meta("hash_seed"));
    } catch (const json::exception& e) {
        throw DataError(origin + ": bad router metadata: " + e.what());
    } catch (const std::logic_error& e) {
        throw DataError(origin + ": bad router metadata: " + std::string(e.what()));
    }
    check_tok(model.tok);
    if (model.classes.size() < 2)
        throw DataError(origin + ": router model has fewer than two classes");

    auto wi = f.tensors.find("weights");
    auto bi = f.tensors.find("bias");
    if (wi == f.tensors.end() || bi == f.tensors.end())
        throw DataError(origin + ": router model needs 'weights' and 'bias' tensors");
    const st::RawTensor& w = wi->second;
    const st::RawTensor& b = bi->second;
    if (w.dtype != st::Dtype::f32 || w.shape.size() != 2 ||
        w.shape[0] != model.classes.size() || w.shape[1] != model.tok.dim)
        throw DataError(origin + ": weights tensor has the wrong dtype or shape");
    if (b.dtype != st::Dtype::f32 || b.shape.size() != 1 ||
        b.shape[0] != model.classes.size())
        throw DataError(origin + ": bias tensor has the wrong dtype or shape");

    model.weights = Tensor2D(w.shape[0], w.shape[1]);
    std::memcpy(model.weights.data.data(), w.bytes.data(), w.bytes.size());
    model.bias.resize(b.shape[0]);
    std::memcpy(model.bias.data(), b.bytes.data(), b.bytes.size());
    return model;
}

std::vector<LabeledQuery> read_labeled_queries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
    std::vector<LabeledQuery> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": invalid JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j.contains("label") ||
            !j["text"].is_string() || !j["label"].is_string())
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": expected {\"text\": ..., \"label\": ...}");
        out.push_back({j["text"].get<std::string>(), j["label"].get<std::string>()});
    }
    return out;
}

namespace router_detail {

double mean_loss(const RouterModel& model, const std::vector<Sample>& samples) {
    double total = 0.0;
    for (const Sample& sm : samples) {
        const std::vector<double> p = softmax(logits_of(model, sm.first));
        total += -std::log(std::max(p[sm.second], 1e-300));
    }
    return total / static_cast<double>(samples.size());
}

void mean_loss_grad(const RouterModel& model, const std::vector<Sample>& samples,
                    std::vector<double>& grad_w, std::vector<double>& grad_b) {
    const std::size_t nc = model.classes.size();
    const std::size_t d = model.tok.dim;
    grad_w.assign(nc * d, 0.0);
    grad_b.assign(nc, 0.0);
    for (const Sample& sm : samples) {
        std::vector<double> p = softmax(logits_of(model, sm.first));
        p[sm.second] -= 1.0;
        for (std::size_t c = 0; c < nc; ++c) {
            for (const auto& [idx, v] : sm.first)
                grad_w[c * d + idx] += p[c] * static_cast<double>(v);
            grad_b[c] += p[c];
        }
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (double& g : grad_w) g *= inv;
    for (double& g : grad_b) g *= inv;
}

} // namespace router_detail

} // namespace cm

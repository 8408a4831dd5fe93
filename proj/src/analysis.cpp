#include "cm/analysis.hpp"

#include "cm/errors.hpp"
#include "cm/kernels.hpp"
#include "cm/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <vector>

namespace cm {

double cosine(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw DataError("cosine: vector lengths differ (" + std::to_string(u.size()) +
                        " vs " + std::to_string(v.size()) + ")");
    const float nu = kern::squared_norm(u.data(), u.size());
    const float nv = kern::squared_norm(v.data(), v.size());
    if (nu == 0.0f || nv == 0.0f) return 0.0;
    const double c = static_cast<double>(kern::dot(u.data(), v.data(), u.size())) /
                     (std::sqrt(static_cast<double>(nu)) * std::sqrt(static_cast<double>(nv)));
    return std::clamp(c, -1.0, 1.0);
}

SimilarityReport similarity_proportions(
    const Checkpoint& base, const Checkpoint& reference,
    const std::vector<std::pair<std::string, Checkpoint>>& candidates, bool use_deltas,
    unsigned threads) {
    if (candidates.empty()) throw DataError("empty candidate list");
    require_aligned(base, reference);
    for (const auto& [name, ckpt] : candidates) {
        (void)name;
        require_aligned(base, ckpt);
    }

    SimilarityReport report;
    report.use_deltas = use_deltas;
    for (const auto& [name, ckpt] : candidates) {
        (void)ckpt;
        report.candidates.push_back(name);
    }
    const std::size_t nc = candidates.size();

    std::vector<const std::string*> names;
    for (const auto& [layer, t] : base.layers) {
        (void)t;
        report.proportions.emplace(layer, std::vector<double>(nc, 0.0));
        names.push_back(&layer);
    }

    parallel_for(names.size(), threads, [&](std::size_t li) {
        const std::string& layer = *names[li];
        const Tensor2D& bt = base.layers.at(layer);
        const Tensor2D& rt = reference.layers.at(layer);
        const std::size_t cols = bt.cols;

        std::vector<std::size_t> counts(nc, 0);
        std::vector<float> ref_row(cols);
        std::vector<float> cand_row(cols);
        for (std::size_t ch = 0; ch < bt.rows; ++ch) {
            const float* r = rt.row(ch);
            if (use_deltas) {
                kern::sub(ref_row.data(), r, bt.row(ch), cols);
                r = ref_row.data();
            }
            std::size_t winner = 0;
            double best = -2.0;
            for (std::size_t c = 0; c < nc; ++c) {
                const float* cr = candidates[c].second.layers.at(layer).row(ch);
                if (use_deltas) {
                    kern::sub(cand_row.data(), cr, bt.row(ch), cols);
                    cr = cand_row.data();
                }
                const double sim = cosine({r, cols}, {cr, cols});
                if (sim > best) { // strict: ties keep the lowest candidate index
                    best = sim;
                    winner = c;
                }
            }
            ++counts[winner];
        }
        std::vector<double>& props = report.proportions.at(layer);
        for (std::size_t c = 0; c < nc; ++c)
            props[c] = static_cast<double>(counts[c]) / static_cast<double>(bt.rows);
    });
    return report;
}

OverlapMatrix expert_overlap(const MergedBundle& bundle) {
    validate_bundle(bundle);
    OverlapMatrix m;
    m.experts = bundle.manifest.experts;
    const std::size_t n = m.experts.size();
    m.values.assign(n * n, 0.0);
    const std::size_t total = bundle.groups[0].channel_count();

    for (std::size_t a = 0; a < n; ++a) {
        const IndexTensor& ia = bundle.indices.at(m.experts[a]);
        for (std::size_t b = 0; b < n; ++b) {
            const IndexTensor& ib = bundle.indices.at(m.experts[b]);
            std::size_t match = 0;
            for (const auto& [layer, va] : ia) {
                const std::vector<std::uint32_t>& vb = ib.at(layer);
                for (std::size_t ch = 0; ch < va.size(); ++ch)
                    if (va[ch] == vb[ch]) ++match;
            }
            m.values[a * n + b] =
                static_cast<double>(match) / static_cast<double>(total);
        }
    }
    return m;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void check_csv_name(const std::string& name) {
    if (name.find(',') != std::string::npos || name.find('\n') != std::string::npos)
        throw DataError("name '" + name + "' cannot be written to CSV");
}

std::vector<std::string> split_fields(const std::string& line, std::size_t expect,
                                      std::size_t lineno) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (out.size() != expect)
        throw DataError("CSV line " + std::to_string(lineno) + " has " +
                        std::to_string(out.size()) + " fields, expected " +
                        std::to_string(expect));
    return out;
}

double parse_double(const std::string& s, std::size_t lineno) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw DataError("CSV line " + std::to_string(lineno) + ": '" + s +
                        "' is not a number");
    return v;
}

} // namespace

std::string similarity_csv(const SimilarityReport& report) {
    std::ostringstream out;
    out << "# rows=" << (report.use_deltas ? "deltas" : "weights")
        << " ties=lowest-candidate\n";
    out << "layer,candidate,proportion\n";
    for (const auto& [layer, props] : report.proportions) {
        check_csv_name(layer);
        for (std::size_t c = 0; c < report.candidates.size(); ++c) {
            check_csv_name(report.candidates[c]);
            out << layer << ',' << report.candidates[c] << ',' << fmt(props[c]) << '\n';
        }
    }
    return out.str();
}

SimilarityReport similarity_from_csv(const std::string& text) {
    SimilarityReport report;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    std::map<std::string, std::size_t> cand_index;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.find("rows=weights") != std::string::npos) report.use_deltas = false;
            continue;
        }
        if (!header_seen) {
            if (line != "layer,candidate,proportion")
                throw DataError("unexpected similarity CSV header: " + line);
            header_seen = true;
            continue;
        }
        const auto f = split_fields(line, 3, lineno);
        auto [it, fresh] = cand_index.emplace(f[1], report.candidates.size());
        if (fresh) report.candidates.push_back(f[1]);
        std::vector<double>& props = report.proportions[f[0]];
        if (props.size() <= it->second) props.resize(it->second + 1, 0.0);
        props[it->second] = parse_double(f[2], lineno);
    }
    if (!header_seen) throw DataError("similarity CSV has no header");
    return report;
}

std::string overlap_csv(const OverlapMatrix& matrix) {
    std::ostringstream out;
    out << "expert_a,expert_b,fraction\n";
    const std::size_t n = matrix.experts.size();
    for (std::size_t a = 0; a < n; ++a) {
        check_csv_name(matrix.experts[a]);
        for (std::size_t b = 0; b < n; ++b)
            out << matrix.experts[a] << ',' << matrix.experts[b] << ','
                << fmt(matrix.at(a, b)) << '\n';
    }
    return out.str();
}

OverlapMatrix overlap_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    std::map<std::string, std::size_t> index;
    std::vector<std::string> experts;
    std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>> entries;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line != "expert_a,expert_b,fraction")
                throw DataError("unexpected overlap CSV header: " + line);
            header_seen = true;
            continue;
        }
        const auto f = split_fields(line, 3, lineno);
        for (const std::string& name : {f[0], f[1]}) {
            if (index.emplace(name, experts.size()).second) experts.push_back(name);
        }
        entries.push_back({{index.at(f[0]), index.at(f[1])}, parse_double(f[2], lineno)});
    }
    if (!header_seen) throw DataError("overlap CSV has no header");
    OverlapMatrix m;
    m.experts = std::move(experts);
    m.values.assign(m.experts.size() * m.experts.size(), 0.0);
    for (const auto& [ab, v] : entries) m.values[ab.first * m.experts.size() + ab.second] = v;
    return m;
}

} // namespace cm

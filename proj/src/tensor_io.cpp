#include "cm/tensor_io.hpp"

#include "cm/errors.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <utility>

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");
static_assert(sizeof(float) == 4, "float32 storage assumes 4-byte float");

using nlohmann::json;

namespace cm::st {

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "F32" : "U32"; }

std::size_t dtype_size(Dtype d) {
    (void)d;
    return 4; // both supported dtypes are 4 bytes wide
}

std::size_t RawTensor::elem_count() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return shape.empty() ? 0 : n;
}

std::vector<std::uint8_t> serialize(const File& f) {
    json header = json::object();
    if (!f.metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : f.metadata) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }
    std::size_t offset = 0;
    for (const auto& [name, t] : f.tensors) {
        const std::size_t nbytes = t.bytes.size();
        json entry = json::object();
        entry["dtype"] = dtype_name(t.dtype);
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + nbytes};
        header[name] = std::move(entry);
        offset += nbytes;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t hlen = text.size();
    out.resize(8);
    std::memcpy(out.data(), &hlen, 8);
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : f.tensors)
        out.insert(out.end(), t.bytes.begin(), t.bytes.end());
    return out;
}

namespace {

Dtype parse_dtype(const std::string& s, const std::string& origin) {
    if (s == "F32") return Dtype::f32;
    if (s == "U32") return Dtype::u32;
    throw DataError(origin + ": unsupported dtype '" + s + "' (expected F32 or U32)");
}

} // namespace

File parse(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 8)
        throw DataError(origin + ": truncated header (file shorter than 8 bytes)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data(), 8);
    if (hlen > bytes.size() - 8)
        throw DataError(origin + ": truncated header (declared length " +
                        std::to_string(hlen) + " exceeds file size)");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw DataError(origin + ": header is not valid JSON: " + e.what());
    }
    if (!header.is_object())
        throw DataError(origin + ": header is not a JSON object");

    const std::size_t data_begin = 8 + hlen;
    const std::size_t data_size = bytes.size() - data_begin;

    File out;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object())
                throw DataError(origin + ": __metadata__ is not an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string())
                    throw DataError(origin + ": __metadata__ value for '" + k +
                                    "' is not a string");
                out.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw DataError(origin + ": tensor '" + name +
                            "' is missing dtype, shape, or data_offsets");

        RawTensor t;
        t.dtype = parse_dtype(entry["dtype"].get<std::string>(), origin);
        for (const auto& dim : entry["shape"]) {
            if (!dim.is_number_unsigned())
                throw DataError(origin + ": tensor '" + name +
                                "' has a negative or non-integer dimension");
            t.shape.push_back(dim.get<std::size_t>());
        }
        const auto& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned())
            throw DataError(origin + ": tensor '" + name + "' has malformed data_offsets");
        const std::size_t begin = offs[0].get<std::size_t>();
        const std::size_t end = offs[1].get<std::size_t>();
        if (begin > end || end > data_size)
            throw DataError(origin + ": tensor '" + name + "' has out-of-range data_offsets [" +
                            std::to_string(begin) + ", " + std::to_string(end) + ")");
        const std::size_t expect = t.elem_count() * dtype_size(t.dtype);
        if (end - begin != expect)
            throw DataError(origin + ": tensor '" + name + "' declares " +
                            std::to_string(end - begin) + " bytes but its shape needs " +
                            std::to_string(expect));
        t.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_begin + begin),
                       bytes.begin() + static_cast<std::ptrdiff_t>(data_begin + end));
        spans.emplace_back(begin, end);
        out.tensors.emplace(name, std::move(t));
    }

    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second)
            throw DataError(origin + ": overlapping tensor data_offsets");

    return out;
}

File read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad())
        throw DataError("failed reading '" + path.string() + "'");
    return parse(bytes, path.string());
}

void write_file(const std::filesystem::path& path, const File& f) {
    const std::vector<std::uint8_t> bytes = serialize(f);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("failed writing '" + path.string() + "'");
}

} // namespace cm::st

namespace cm {

namespace {

constexpr const char* kOrigRankPrefix = "orig_rank:";

} // namespace

Checkpoint read_tensor_file(const std::filesystem::path& path) {
    const st::File f = st::read_file(path);
    const std::string origin = path.string();

    Checkpoint ckpt;
    ckpt.name = path.stem().string();
    ckpt.metadata = f.metadata;
    for (const auto& [name, raw] : f.tensors) {
        if (raw.dtype != st::Dtype::f32)
            throw DataError(origin + ": tensor '" + name +
                            "' has dtype U32; checkpoints must be F32");
        Tensor2D t;
        if (raw.shape.size() == 2) {
            t.rows = raw.shape[0];
            t.cols = raw.shape[1];
        } else if (raw.shape.size() == 1) {
            t.rows = raw.shape[0];
            t.cols = 1;
            t.from_rank1 = true;
            ckpt.metadata.erase(kOrigRankPrefix + name);
        } else {
            throw DataError(origin + ": tensor '" + name + "' has rank " +
                            std::to_string(raw.shape.size()) +
                            "; only 2-D tensors and 1-D tensors (promoted to [O, 1]) are supported");
        }
        t.data.resize(raw.elem_count());
        std::memcpy(t.data.data(), raw.bytes.data(), raw.bytes.size());
        for (float v : t.data)
            if (!std::isfinite(v))
                throw DataError(origin + ": tensor '" + name + "' contains a non-finite value");
        ckpt.layers.emplace(name, std::move(t));
    }
    return ckpt;
}

std::vector<std::uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt) {
    if (ckpt.layers.empty())
        throw DataError("refusing to serialize an empty checkpoint");
    st::File f;
    f.metadata = ckpt.metadata;
    for (const auto& [name, t] : ckpt.layers) {
        st::RawTensor raw;
        raw.dtype = st::Dtype::f32;
        if (t.from_rank1) {
            raw.shape = {t.rows};
            f.metadata[kOrigRankPrefix + name] = "1";
        } else {
            raw.shape = {t.rows, t.cols};
        }
        raw.bytes.resize(t.data.size() * sizeof(float));
        std::memcpy(raw.bytes.data(), t.data.data(), raw.bytes.size());
        f.tensors.emplace(name, std::move(raw));
    }
    return st::serialize(f);
}

void write_tensor_file(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = checkpoint_to_bytes(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("failed writing '" + path.string() + "'");
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

std::string checkpoint_sha256(const Checkpoint& ckpt) {
    return sha256_hex(checkpoint_to_bytes(ckpt));
}

} // namespace cm

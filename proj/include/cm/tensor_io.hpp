#pragma once

#include "cm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

// Tensor file I/O in the safetensors byte layout: an unsigned 64-bit
// little-endian header length, a UTF-8 JSON header mapping tensor name to
// {dtype, shape, data_offsets} (plus an optional "__metadata__" string map),
// then the raw little-endian buffers. Writes are canonical — tensors sorted
// by name, contiguous offsets, no padding — so equal values produce equal
// bytes and content hashes are stable.

namespace cm::st {

enum class Dtype { f32, u32 };

const char* dtype_name(Dtype d);
std::size_t dtype_size(Dtype d);

// One stored tensor, undecoded. Shape is rank 1 or 2 as written in the file.
struct RawTensor {
    Dtype dtype = Dtype::f32;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;

    std::size_t elem_count() const;
};

struct File {
    std::map<std::string, RawTensor> tensors;
    std::map<std::string, std::string> metadata;
};

// Canonical serialization; pure function of the value.
std::vector<std::uint8_t> serialize(const File& f);

// Parses and validates layout: header length within bounds, valid JSON,
// supported dtype, offsets in range and non-overlapping, byte counts matching
// shapes. Throws DataError otherwise.
File parse(const std::vector<std::uint8_t>& bytes, const std::string& origin);

File read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const File& f);

} // namespace cm::st

namespace cm {

// Decodes a float32 tensor file into a Checkpoint. Rank-1 tensors are
// promoted to [O, 1]; a "orig_rank:<name>" metadata flag written by
// write_tensor_file records the original rank and is consumed here. Rejects
// non-float32 dtypes, ranks other than 1 or 2, and non-finite values.
Checkpoint read_tensor_file(const std::filesystem::path& path);

// Canonical bytes of a checkpoint (what write_tensor_file puts on disk).
// Tensors flagged from_rank1 are demoted back to rank-1 shape [O].
std::vector<std::uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt);

// Throws DataError on an empty checkpoint or unwritable path.
void write_tensor_file(const Checkpoint& ckpt, const std::filesystem::path& path);

// Lowercase hex SHA-256 digest.
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

// Content hash of a checkpoint's canonical bytes, used for manifest
// base_sha256 fields.
std::string checkpoint_sha256(const Checkpoint& ckpt);

} // namespace cm

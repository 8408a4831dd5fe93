#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace cm {

// Dense row-major float32 matrix. Rows are output channels, columns are input
// features. 1-D tensors (biases, norms) are carried as [rows, 1] with
// from_rank1 set so they can be demoted back to 1-D on save.
struct Tensor2D {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data; // length rows * cols
    bool from_rank1 = false;

    Tensor2D() = default;
    Tensor2D(std::size_t r, std::size_t c, float fill = 0.0f)
        : rows(r), cols(c), data(r * c, fill) {}

    std::size_t size() const { return rows * cols; }
    float* row(std::size_t i) { return data.data() + i * cols; }
    const float* row(std::size_t i) const { return data.data() + i * cols; }
    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    bool same_shape(const Tensor2D& o) const {
        return rows == o.rows && cols == o.cols && from_rank1 == o.from_rank1;
    }
};

// One model's weights: layer name -> matrix. std::map keeps iteration in
// lexicographic order, which is the canonical order everywhere (file layout,
// hashing, summation).
struct Checkpoint {
    std::string name;                             // label only, never serialized
    std::map<std::string, Tensor2D> layers;
    std::map<std::string, std::string> metadata;  // header metadata, round-tripped

    std::size_t param_count() const;
    std::size_t channel_count() const; // total output channels across layers
};

// Bit-level equality (distinguishes -0.0 from +0.0, compares NaN payloads).
bool bitwise_equal(const Tensor2D& a, const Tensor2D& b);
// Compares layers bitwise plus metadata; the name label is ignored.
bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

// Throws DataError naming the first offending layer if `other` does not have
// exactly the same layer names and shapes as `base`.
void require_aligned(const Checkpoint& base, const Checkpoint& other);

} // namespace cm

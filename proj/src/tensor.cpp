#include "cm/tensor.hpp"

#include "cm/errors.hpp"

#include <cstring>

namespace cm {

std::size_t Checkpoint::param_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : layers) total += t.size();
    return total;
}

std::size_t Checkpoint::channel_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : layers) total += t.rows;
    return total;
}

bool bitwise_equal(const Tensor2D& a, const Tensor2D& b) {
    if (!a.same_shape(b)) return false;
    if (a.data.empty()) return true;
    return std::memcmp(a.data.data(), b.data.data(),
                       a.data.size() * sizeof(float)) == 0;
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.metadata != b.metadata) return false;
    if (a.layers.size() != b.layers.size()) return false;
    auto ia = a.layers.begin();
    auto ib = b.layers.begin();
    for (; ia != a.layers.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        if (!bitwise_equal(ia->second, ib->second)) return false;
    }
    return true;
}

void require_aligned(const Checkpoint& base, const Checkpoint& other) {
    for (const auto& [name, t] : base.layers) {
        auto it = other.layers.find(name);
        if (it == other.layers.end())
            throw DataError("checkpoint '" + other.name + "' is missing layer '" +
                            name + "'");
        if (!t.same_shape(it->second))
            throw DataError("layer '" + name + "' has shape [" +
                            std::to_string(it->second.rows) + ", " +
                            std::to_string(it->second.cols) + "] in checkpoint '" +
                            other.name + "' but [" + std::to_string(t.rows) + ", " +
                            std::to_string(t.cols) + "] in the base");
    }
    for (const auto& [name, t] : other.layers) {
        (void)t;
        if (base.layers.find(name) == base.layers.end())
            throw DataError("checkpoint '" + other.name + "' has extra layer '" +
                            name + "' not present in the base");
    }
}

} // namespace cm

#include "cm/kernels.hpp"

#include <cmath>

// Reference kernels. The eight-lane accumulator layout in the reductions is
// part of the kernel contract (see kernels.hpp): SIMD backends reproduce it
// exactly, so reductions are bit-identical everywhere.

namespace cm::kern::scalar {

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void add_inplace(float* acc, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc[i] += x[i];
}

void scale(float* dst, const float* x, float alpha, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = alpha * x[i];
}

void scale_inplace(float* x, float alpha, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = alpha * x[i];
}

void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const float scaled = alpha * x[i];
        dst[i] = base[i] + scaled;
    }
}

namespace {

inline float combine_lanes(const float lane[8]) {
    const float s0 = lane[0] + lane[4];
    const float s1 = lane[1] + lane[5];
    const float s2 = lane[2] + lane[6];
    const float s3 = lane[3] + lane[7];
    return (s0 + s2) + (s1 + s3);
}

} // namespace

float dot(const float* a, const float* b, std::size_t n) {
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
    for (std::size_t j = 0; i < n; ++i, ++j) lane[j] += a[i] * b[i];
    return combine_lanes(lane);
}

float squared_norm(const float* a, std::size_t n) {
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lane[l] += a[i + l] * a[i + l];
    for (std::size_t j = 0; i < n; ++i, ++j) lane[j] += a[i] * a[i];
    return combine_lanes(lane);
}

float squared_distance(const float* a, const float* b, std::size_t n) {
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) {
            const float d = a[i + l] - b[i + l];
            lane[l] += d * d;
        }
    for (std::size_t j = 0; i < n; ++i, ++j) {
        const float d = a[i] - b[i];
        lane[j] += d * d;
    }
    return combine_lanes(lane);
}

float l1_distance(const float* a, const float* b, std::size_t n) {
    float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lane[l] += std::fabs(a[i + l] - b[i + l]);
    for (std::size_t j = 0; i < n; ++i, ++j) lane[j] += std::fabs(a[i] - b[i]);
    return combine_lanes(lane);
}

} // namespace cm::kern::scalar

#include "kernels_impl.hpp"

#if CM_HAVE_AVX2

#include <immintrin.h>

#include <cmath>

// AVX2 variants. Element-wise ops use plain vmul/vadd/vsub (no FMA) and the
// reductions keep one 8-lane vector accumulator with the scalar tail folded
// into lanes 0..(tail-1), matching the scalar reference bit-for-bit.

namespace cm::kern::avx2 {

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void add_inplace(float* acc, const float* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(acc + i, _mm256_add_ps(_mm256_loadu_ps(acc + i), _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) acc[i] += x[i];
}

void scale(float* dst, const float* x, float alpha, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) dst[i] = alpha * x[i];
}

void scale_inplace(float* x, float alpha, std::size_t n) {
    scale(x, x, alpha, n);
}

void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 scaled = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(base + i), scaled));
    }
    for (; i < n; ++i) {
        const float scaled = alpha * x[i];
        dst[i] = base[i] + scaled;
    }
}

namespace {

// ((l0+l4)+(l2+l6)) + ((l1+l5)+(l3+l7)), same tree as the scalar reference.
inline float reduce_lanes(__m256 acc) {
    const __m128 s = _mm_add_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
    const __m128 t = _mm_add_ps(s, _mm_movehl_ps(s, s));          // (s0+s2, s1+s3, _, _)
    const __m128 r = _mm_add_ss(t, _mm_shuffle_ps(t, t, 0x55));   // (s0+s2)+(s1+s3)
    return _mm_cvtss_f32(r);
}

inline float reduce_with_tail(__m256 acc, const float* tail_terms, std::size_t tail) {
    alignas(32) float lane[8];
    _mm256_store_ps(lane, acc);
    for (std::size_t j = 0; j < tail; ++j) lane[j] += tail_terms[j];
    const float s0 = lane[0] + lane[4];
    const float s1 = lane[1] + lane[5];
    const float s2 = lane[2] + lane[6];
    const float s3 = lane[3] + lane[7];
    return (s0 + s2) + (s1 + s3);
}

} // namespace

float dot(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    if (i == n) return reduce_lanes(acc);
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = a[i] * b[i];
    return reduce_with_tail(acc, tail, t);
}

float squared_norm(const float* a, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(a + i);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(v, v));
    }
    if (i == n) return reduce_lanes(acc);
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = a[i] * a[i];
    return reduce_with_tail(acc, tail, t);
}

float squared_distance(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        acc = _mm256_add_ps(acc, _mm256_mul_ps(d, d));
    }
    if (i == n) return reduce_lanes(acc);
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) {
        const float d = a[i] - b[i];
        tail[t] = d * d;
    }
    return reduce_with_tail(acc, tail, t);
}

float l1_distance(const float* a, const float* b, std::size_t n) {
    const __m256 sign_mask = _mm256_set1_ps(-0.0f);
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
        acc = _mm256_add_ps(acc, _mm256_andnot_ps(sign_mask, d));
    }
    if (i == n) return reduce_lanes(acc);
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = std::fabs(a[i] - b[i]);
    return reduce_with_tail(acc, tail, t);
}

} // namespace cm::kern::avx2

#endif // CM_HAVE_AVX2

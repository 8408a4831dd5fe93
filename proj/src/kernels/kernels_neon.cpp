#include "kernels_impl.hpp"

#if CM_HAVE_NEON

#include <arm_neon.h>

#include <cmath>

// NEON variants. Two 4-lane accumulators stand in for the contract's eight
// strided lanes (lo = lanes 0..3, hi = lanes 4..7); the combine tree and the
// scalar tail handling match the scalar reference bit-for-bit.

namespace cm::kern::neon {

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        vst1q_f32(dst + i, vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void add_inplace(float* acc, const float* x, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        vst1q_f32(acc + i, vaddq_f32(vld1q_f32(acc + i), vld1q_f32(x + i)));
    for (; i < n; ++i) acc[i] += x[i];
}

void scale(float* dst, const float* x, float alpha, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        vst1q_f32(dst + i, vmulq_f32(va, vld1q_f32(x + i)));
    for (; i < n; ++i) dst[i] = alpha * x[i];
}

void scale_inplace(float* x, float alpha, std::size_t n) {
    scale(x, x, alpha, n);
}

void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const float32x4_t scaled = vmulq_f32(va, vld1q_f32(x + i));
        vst1q_f32(dst + i, vaddq_f32(vld1q_f32(base + i), scaled));
    }
    for (; i < n; ++i) {
        const float scaled = alpha * x[i];
        dst[i] = base[i] + scaled;
    }
}

namespace {

inline float reduce_with_tail(float32x4_t lo, float32x4_t hi,
                              const float* tail_terms, std::size_t tail) {
    float lane[8];
    vst1q_f32(lane, lo);
    vst1q_f32(lane + 4, hi);
    for (std::size_t j = 0; j < tail; ++j) lane[j] += tail_terms[j];
    const float s0 = lane[0] + lane[4];
    const float s1 = lane[1] + lane[5];
    const float s2 = lane[2] + lane[6];
    const float s3 = lane[3] + lane[7];
    return (s0 + s2) + (s1 + s3);
}

} // namespace

float dot(const float* a, const float* b, std::size_t n) {
    float32x4_t lo = vdupq_n_f32(0.0f), hi = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        lo = vaddq_f32(lo, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
        hi = vaddq_f32(hi, vmulq_f32(vld1q_f32(a + i + 4), vld1q_f32(b + i + 4)));
    }
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = a[i] * b[i];
    return reduce_with_tail(lo, hi, tail, t);
}

float squared_norm(const float* a, std::size_t n) {
    float32x4_t lo = vdupq_n_f32(0.0f), hi = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const float32x4_t v0 = vld1q_f32(a + i);
        const float32x4_t v1 = vld1q_f32(a + i + 4);
        lo = vaddq_f32(lo, vmulq_f32(v0, v0));
        hi = vaddq_f32(hi, vmulq_f32(v1, v1));
    }
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = a[i] * a[i];
    return reduce_with_tail(lo, hi, tail, t);
}

float squared_distance(const float* a, const float* b, std::size_t n) {
    float32x4_t lo = vdupq_n_f32(0.0f), hi = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const float32x4_t d0 = vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i));
        const float32x4_t d1 = vsubq_f32(vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
        lo = vaddq_f32(lo, vmulq_f32(d0, d0));
        hi = vaddq_f32(hi, vmulq_f32(d1, d1));
    }
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) {
        const float d = a[i] - b[i];
        tail[t] = d * d;
    }
    return reduce_with_tail(lo, hi, tail, t);
}

float l1_distance(const float* a, const float* b, std::size_t n) {
    float32x4_t lo = vdupq_n_f32(0.0f), hi = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const float32x4_t d0 = vsubq_f32(vld1q_f32(a + i), vld1q_f32(b + i));
        const float32x4_t d1 = vsubq_f32(vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
        lo = vaddq_f32(lo, vabsq_f32(d0));
        hi = vaddq_f32(hi, vabsq_f32(d1));
    }
    float tail[8];
    std::size_t t = 0;
    for (; i < n; ++i, ++t) tail[t] = std::fabs(a[i] - b[i]);
    return reduce_with_tail(lo, hi, tail, t);
}

} // namespace cm::kern::neon

#endif // CM_HAVE_NEON

#pragma once

#include <cstddef>

// Per-backend kernel entry points. Only the backends compiled for the target
// architecture are declared; dispatch.cpp wires them into the public API.

namespace cm::kern {

#if CM_HAVE_AVX2
namespace avx2 {
void sub(float* dst, const float* a, const float* b, std::size_t n);
void add_inplace(float* acc, const float* x, std::size_t n);
void scale(float* dst, const float* x, float alpha, std::size_t n);
void scale_inplace(float* x, float alpha, std::size_t n);
void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float squared_norm(const float* a, std::size_t n);
float squared_distance(const float* a, const float* b, std::size_t n);
float l1_distance(const float* a, const float* b, std::size_t n);
} // namespace avx2
#endif

#if CM_HAVE_NEON
namespace neon {
void sub(float* dst, const float* a, const float* b, std::size_t n);
void add_inplace(float* acc, const float* x, std::size_t n);
void scale(float* dst, const float* x, float alpha, std::size_t n);
void scale_inplace(float* x, float alpha, std::size_t n);
void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float squared_norm(const float* a, std::size_t n);
float squared_distance(const float* a, const float* b, std::size_t n);
float l1_distance(const float* a, const float* b, std::size_t n);
} // namespace neon
#endif

} // namespace cm::kern

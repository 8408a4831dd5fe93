#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Data-parallel float32 kernels behind the whole pipeline: delta subtraction,
// merge accumulation, and the distance/dot reductions used by clustering.
//
// Every kernel has a scalar reference implementation and, where the build
// target supports it, an AVX2 or NEON variant selected at runtime. All
// variants are bit-exact with the scalar reference:
//   - element-wise kernels perform the same IEEE op per element (no FMA), and
//   - reductions accumulate into eight strided partial sums
//     (lane[i % 8] += term_i) combined in a fixed tree
//     ((l0+l4)+(l2+l6)) + ((l1+l5)+(l3+l7)),
// so merged bundles and cluster assignments do not depend on the machine the
// toolkit runs on. The equivalence tests assert bitwise equality across all
// available backends.

namespace cm::kern {

enum class Isa { scalar, avx2, neon };

const char* isa_name(Isa isa);

// Backends usable on this machine (scalar always included).
std::vector<Isa> available_isas();

// Backend currently dispatched to. Defaults to the best available; the
// CM_ISA environment variable ("scalar", "avx2", "neon") overrides at startup.
Isa active_isa();

// Force a backend; throws std::runtime_error if it is not available here.
void force_isa(Isa isa);

// dst[i] = a[i] - b[i]
void sub(float* dst, const float* a, const float* b, std::size_t n);
// acc[i] += x[i]
void add_inplace(float* acc, const float* x, std::size_t n);
// dst[i] = alpha * x[i]
void scale(float* dst, const float* x, float alpha, std::size_t n);
// x[i] *= alpha
void scale_inplace(float* x, float alpha, std::size_t n);
// dst[i] = base[i] + alpha * x[i]   (mul then add, never fused)
void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n);

float dot(const float* a, const float* b, std::size_t n);
float squared_norm(const float* a, std::size_t n);
float squared_distance(const float* a, const float* b, std::size_t n);
float l1_distance(const float* a, const float* b, std::size_t n);

// Scalar reference implementations, always available. The dispatched entry
// points above must match these bit-for-bit.
namespace scalar {
void sub(float* dst, const float* a, const float* b, std::size_t n);
void add_inplace(float* acc, const float* x, std::size_t n);
void scale(float* dst, const float* x, float alpha, std::size_t n);
void scale_inplace(float* x, float alpha, std::size_t n);
void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n);
float dot(const float* a, const float* b, std::size_t n);
float squared_norm(const float* a, std::size_t n);
float squared_distance(const float* a, const float* b, std::size_t n);
float l1_distance(const float* a, const float* b, std::size_t n);
} // namespace scalar

} // namespace cm::kern

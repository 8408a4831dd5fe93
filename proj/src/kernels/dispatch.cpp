#include "cm/kernels.hpp"

#include "kernels_impl.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace cm::kern {

namespace {

struct Table {
    void (*sub)(float*, const float*, const float*, std::size_t);
    void (*add_inplace)(float*, const float*, std::size_t);
    void (*scale)(float*, const float*, float, std::size_t);
    void (*scale_inplace)(float*, float, std::size_t);
    void (*scale_add)(float*, const float*, float, const float*, std::size_t);
    float (*dot)(const float*, const float*, std::size_t);
    float (*squared_norm)(const float*, std::size_t);
    float (*squared_distance)(const float*, const float*, std::size_t);
    float (*l1_distance)(const float*, const float*, std::size_t);
};

constexpr Table kScalarTable = {
    scalar::sub,         scalar::add_inplace,      scalar::scale,
    scalar::scale_inplace, scalar::scale_add,      scalar::dot,
    scalar::squared_norm,  scalar::squared_distance, scalar::l1_distance,
};

#if CM_HAVE_AVX2
constexpr Table kAvx2Table = {
    avx2::sub,         avx2::add_inplace,      avx2::scale,
    avx2::scale_inplace, avx2::scale_add,      avx2::dot,
    avx2::squared_norm,  avx2::squared_distance, avx2::l1_distance,
};
#endif

#if CM_HAVE_NEON
constexpr Table kNeonTable = {
    neon::sub,         neon::add_inplace,      neon::scale,
    neon::scale_inplace, neon::scale_add,      neon::dot,
    neon::squared_norm,  neon::squared_distance, neon::l1_distance,
};
#endif

bool isa_available(Isa isa) {
    switch (isa) {
    case Isa::scalar:
        return true;
    case Isa::avx2:
#if CM_HAVE_AVX2
        return __builtin_cpu_supports("avx2") != 0;
#else
        return false;
#endif
    case Isa::neon:
#if CM_HAVE_NEON
        // NEON is baseline on every aarch64 core this builds for.
        return true;
#else
        return false;
#endif
    }
    return false;
}

const Table* table_for(Isa isa) {
    switch (isa) {
    case Isa::scalar:
        return &kScalarTable;
#if CM_HAVE_AVX2
    case Isa::avx2:
        return &kAvx2Table;
#endif
#if CM_HAVE_NEON
    case Isa::neon:
        return &kNeonTable;
#endif
    default:
        return nullptr;
    }
}

Isa default_isa() {
#if CM_HAVE_AVX2
    if (isa_available(Isa::avx2)) return Isa::avx2;
#endif
#if CM_HAVE_NEON
    if (isa_available(Isa::neon)) return Isa::neon;
#endif
    return Isa::scalar;
}

Isa parse_isa(const std::string& name) {
    if (name == "scalar") return Isa::scalar;
    if (name == "avx2") return Isa::avx2;
    if (name == "neon") return Isa::neon;
    throw std::runtime_error("unknown ISA name '" + name +
                             "' (expected scalar, avx2, or neon)");
}

struct State {
    Isa isa;
    const Table* table;

    State() {
        Isa pick = default_isa();
        if (const char* env = std::getenv("CM_ISA")) {
            const Isa wanted = parse_isa(env);
            if (!isa_available(wanted))
                throw std::runtime_error(std::string("CM_ISA requests '") +
                                         isa_name(wanted) +
                                         "' but it is not available on this machine");
            pick = wanted;
        }
        isa = pick;
        table = table_for(pick);
    }
};

State& state() {
    static State s;
    return s;
}

} // namespace

const char* isa_name(Isa isa) {
    switch (isa) {
    case Isa::scalar:
        return "scalar";
    case Isa::avx2:
        return "avx2";
    case Isa::neon:
        return "neon";
    }
    return "unknown";
}

std::vector<Isa> available_isas() {
    std::vector<Isa> out{Isa::scalar};
    if (isa_available(Isa::avx2)) out.push_back(Isa::avx2);
    if (isa_available(Isa::neon)) out.push_back(Isa::neon);
    return out;
}

Isa active_isa() { return state().isa; }

void force_isa(Isa isa) {
    if (!isa_available(isa))
        throw std::runtime_error(std::string("ISA '") + isa_name(isa) +
                                 "' is not available on this machine");
    state().isa = isa;
    state().table = table_for(isa);
}

void sub(float* dst, const float* a, const float* b, std::size_t n) {
    state().table->sub(dst, a, b, n);
}

void add_inplace(float* acc, const float* x, std::size_t n) {
    state().table->add_inplace(acc, x, n);
}

void scale(float* dst, const float* x, float alpha, std::size_t n) {
    state().table->scale(dst, x, alpha, n);
}

void scale_inplace(float* x, float alpha, std::size_t n) {
    state().table->scale_inplace(x, alpha, n);
}

void scale_add(float* dst, const float* base, float alpha, const float* x, std::size_t n) {
    state().table->scale_add(dst, base, alpha, x, n);
}

float dot(const float* a, const float* b, std::size_t n) {
    return state().table->dot(a, b, n);
}

float squared_norm(const float* a, std::size_t n) {
    return state().table->squared_norm(a, n);
}

float squared_distance(const float* a, const float* b, std::size_t n) {
    return state().table->squared_distance(a, b, n);
}

float l1_distance(const float* a, const float* b, std::size_t n) {
    return state().table->l1_distance(a, b, n);
}

} // namespace cm::kern

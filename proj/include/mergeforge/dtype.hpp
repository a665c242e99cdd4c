#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>

#include "mergeforge/errors.hpp"

namespace mergeforge {

// The three storage dtypes of the supported model family. Anything else in a
// checkpoint header is rejected rather than silently converted.
enum class DType : std::uint8_t { F32, F16, BF16 };

constexpr std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::F32: return 4;
        case DType::F16:
        case DType::BF16: return 2;
    }
    return 0;
}

constexpr std::string_view dtype_tag(DType d) {
    switch (d) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "";
}

inline std::optional<DType> dtype_from_tag(std::string_view tag) {
    if (tag == "F32") return DType::F32;
    if (tag == "F16") return DType::F16;
    if (tag == "BF16") return DType::BF16;
    return std::nullopt;
}

// CLI spelling: f32 / f16 / bf16.
inline std::optional<DType> dtype_from_cli(std::string_view name) {
    if (name == "f32") return DType::F32;
    if (name == "f16") return DType::F16;
    if (name == "bf16") return DType::BF16;
    return std::nullopt;
}

// Scalar conversions. Widening is exact; narrowing rounds to nearest-even
// (Eigen's half/bfloat16 conversions implement IEEE RTNE).
inline float f16_bits_to_f32(std::uint16_t bits) {
    return Eigen::half_impl::half_to_float(Eigen::half_impl::raw_uint16_to_half(bits));
}

inline std::uint16_t f32_to_f16_bits(float v) {
    return Eigen::half_impl::float_to_half_rtne(v).x;
}

inline float bf16_bits_to_f32(std::uint16_t bits) {
    std::uint32_t w = static_cast<std::uint32_t>(bits) << 16;
    float f;
    std::memcpy(&f, &w, sizeof(f));
    return f;
}

inline std::uint16_t f32_to_bf16_bits(float v) {
    return Eigen::bfloat16_impl::float_to_bfloat16_rtne<false>(v).value;
}

// Output dtype selection for save/merge: keep each tensor's stored dtype or
// force one dtype for everything.
struct DtypePolicy {
    std::optional<DType> cast_to;  // nullopt = preserve

    static DtypePolicy preserve() { return {}; }
    static DtypePolicy cast(DType d) { return {d}; }

    DType resolve(DType stored) const { return cast_to.value_or(stored); }
};

}  // namespace mergeforge

#pragma once

#include <cstdint>

namespace deltacomp {

// IEEE 754 binary16 conversion, round-to-nearest-even. Values beyond the
// half range become infinities; callers that need finite storage check.
std::uint16_t float_to_half(float value) noexcept;
float half_to_float(std::uint16_t bits) noexcept;

inline float round_to_half(float value) noexcept { return half_to_float(float_to_half(value)); }

}  // namespace deltacomp

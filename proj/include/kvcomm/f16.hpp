#pragma once

#include <cstdint>
#include <cstring>

namespace kvcomm {

// IEEE 754 binary16 storage conversion, round-to-nearest-even.
inline std::uint16_t f32_to_f16(float value) {
    std::uint32_t bits;
    std::memcpy(&bits, &value, sizeof(bits));
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::uint32_t fexp = (bits >> 23) & 0xFFu;
    const std::uint32_t mant = bits & 0x7FFFFFu;

    if (fexp == 0xFFu) // inf or nan
        return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));

    const std::int32_t hexp = static_cast<std::int32_t>(fexp) - 127 + 15;
    if (hexp >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u); // overflow -> inf
    if (hexp <= 0) {
        if (hexp < -10) return static_cast<std::uint16_t>(sign); // underflows to zero
        // shift the 24-bit significand into subnormal position with RNE
        const std::uint32_t m = mant | 0x800000u;
        const std::uint32_t dropped = static_cast<std::uint32_t>(14 - hexp); // 14..24
        const std::uint32_t half = 1u << (dropped - 1);
        const std::uint32_t rem = m & ((1u << dropped) - 1u);
        std::uint32_t hm = m >> dropped;
        if (rem > half || (rem == half && (hm & 1u))) ++hm;
        return static_cast<std::uint16_t>(sign | hm); // carry into the exponent is correct
    }
    const std::uint32_t hm = mant >> 13;
    const std::uint32_t rem = mant & 0x1FFFu;
    std::uint16_t h =
        static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(hexp) << 10) | hm);
    if (rem > 0x1000u || (rem == 0x1000u && (hm & 1u))) ++h;
    return h;
}

inline float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // normalize subnormal
            int e = -1;
            std::uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            bits = sign | (static_cast<std::uint32_t>(113 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

} // namespace kvcomm

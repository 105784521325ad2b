#pragma once

#include <cstddef>
#include <cstdint>

namespace kvcomm {

// CRC-32 (IEEE 802.3 polynomial, reflected), as used by zlib/PNG.
std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);

} // namespace kvcomm

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace laser {

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(std::string_view bytes);
std::string to_hex(std::span<const std::uint8_t> bytes);
inline std::string sha256_hex(std::string_view bytes) { return to_hex(sha256(bytes)); }

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace laser

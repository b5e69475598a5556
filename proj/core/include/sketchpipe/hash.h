// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace sketchpipe {

/// Lowercase hex SHA-256 of the given bytes.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// True for a 64-character lowercase hex string.
bool is_hex_digest(std::string_view s);

std::string base64_encode(std::span<const std::uint8_t> bytes);

}  // namespace sketchpipe

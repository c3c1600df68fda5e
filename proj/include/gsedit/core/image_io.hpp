#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gsedit/core/image.hpp"

namespace gsedit {

using Image = ImageBuffer<double>;

/// 8-bit PNG (gray or RGB) of an image quantized with round(clamp(v) * 255).
std::vector<std::uint8_t> encode_png(const Image& image);

/// Decodes gray or RGB(A) PNG; alpha is dropped, gray+alpha becomes gray.
Image decode_png(std::span<const std::uint8_t> png);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// 8-bit quantized samples, the transport representation.
std::vector<std::uint8_t> quantize(const Image& image);

/// SHA-256 (hex) over dims + quantized samples. Used to key fixture lookups.
std::string image_key(const Image& image);

std::string sha256_hex(std::string_view data);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file(const std::filesystem::path& path, std::string_view text);

}  // namespace gsedit

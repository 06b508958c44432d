#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fgss/raster.hpp"

namespace fgss::io {

enum class ImageFormat { png, jpeg, unknown };

ImageFormat sniff_format(std::span<const std::uint8_t> bytes);

/// Decodes PNG or JPEG into a single-channel raster (RGB converted via
/// Rec. 601 luma, alpha dropped). Throws RasterError on malformed input.
Raster decode_gray(std::span<const std::uint8_t> bytes);
Raster read_gray(const std::filesystem::path& path);

/// 8-bit grayscale PNG, value = round(255·v).
std::vector<std::uint8_t> encode_png(const Raster& raster);
void write_png(const std::filesystem::path& path, const Raster& raster);

/// Masks are stored as 8-bit gray {0, 255}; reading thresholds at 127.
std::vector<std::uint8_t> encode_png(const BitMask& mask);
void write_png(const std::filesystem::path& path, const BitMask& mask);
BitMask read_mask(const std::filesystem::path& path);

/// 8-bit RGB PNG from interleaved 3-channel raster.
std::vector<std::uint8_t> encode_png_rgb(const Raster& rgb);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fgss::io

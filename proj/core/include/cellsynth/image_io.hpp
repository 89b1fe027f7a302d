#pragma once

#include <filesystem>

#include "cellsynth/common.hpp"

namespace cellsynth {

using Image16 = Image<std::uint16_t>;

/// 8-bit grayscale PNG.
void write_png8(const std::filesystem::path& path, const Image<std::uint8_t>& image);
Image<std::uint8_t> read_png8(const std::filesystem::path& path);

/// Binary mask stored as 0/255; read back as 0/1 (any nonzero pixel is foreground).
void write_mask_png(const std::filesystem::path& path, const MaskImage& mask);
MaskImage read_mask_png(const std::filesystem::path& path);

/// Grayscale TIFF, one page per slice, 8 or 16 bits per sample.
void write_tiff(const std::filesystem::path& path, const std::vector<Image16>& pages, int bits);
/// Reads every page of an 8- or 16-bit single-channel TIFF. `bits` receives the sample depth.
std::vector<Image16> read_tiff(const std::filesystem::path& path, int* bits = nullptr);

/// Linear [0,1] -> [0, 65535] conversion and back, clamping out-of-range values.
Image16 to_uint16(const GrayImage& image);
GrayImage from_uint16(const Image16& image, double max_value = 65535.0);

/// Binary volume as an 8-bit 0/255 stack and back.
void write_mask_stack(const std::filesystem::path& path, const std::vector<MaskImage>& slices);
std::vector<MaskImage> read_mask_stack(const std::filesystem::path& path);

}  // namespace cellsynth

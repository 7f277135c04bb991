#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "inmars/tensor.hpp"

namespace inmars::io {

/// Reads a PNG/TIFF into a (c,h,w) tensor scaled to [0,1] by the source bit depth.
/// Channel order is RGB(A/IR).
Tensor read_image(const std::filesystem::path& path);

/// Writes a (c,h,w) tensor in [0,1] as an 8-bit PNG (c = 1, 3 or 4).
void write_image8(const std::filesystem::path& path, const Tensor& image);

/// Single-channel integer raster (8- or 16-bit PNG).
Grid<std::int32_t> read_label_png(const std::filesystem::path& path);
void write_label_png16(const std::filesystem::path& path, const Grid<std::int32_t>& labels);
void write_label_png8(const std::filesystem::path& path, const Grid<std::int32_t>& labels);

/// 8-bit RGB raster, row-major interleaved.
struct Rgb8Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // h*w*3
};
void write_rgb8(const std::filesystem::path& path, const Rgb8Image& image);
Rgb8Image read_rgb8(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace inmars::io

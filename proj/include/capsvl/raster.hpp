#pragma once

// 8-bit images and their portable pixmap/graymap files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace capsvl {

/// Interleaved 8-bit image, row-major, `channels` values per pixel.
struct Raster {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Binary PPM (P6) for 3 channels, PGM (P5) for 1.
void write_pnm(const std::filesystem::path& path, const Raster& image);
/// Reads P5 or P6 with maxval 255. Throws LoadError.
Raster read_pnm(const std::filesystem::path& path);

/// Grayscale image of a non-negative map scaled by its maximum.
Raster map_to_gray(const std::vector<double>& values, std::size_t width, std::size_t height);

}  // namespace capsvl

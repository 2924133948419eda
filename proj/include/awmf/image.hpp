#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "awmf/common.hpp"

namespace awmf {

// 8-bit raster, row-major, 1 (grayscale / labels) or 3 (RGB) channels with
// interleaved samples.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_extents(const Raster& o) const {
    return width == o.width && height == o.height;
  }
};

// Binary PGM (P5) for single-channel rasters and PPM (P6) for RGB, maxval
// 255. Label maps are PGM with raw class indices; 255 is the ignore label.
Raster load_image(const std::string& path);
void save_image(const Raster& raster, const std::string& path);

Raster load_labels(const std::string& path);
void save_labels(const Raster& labels, const std::string& path);

}  // namespace awmf

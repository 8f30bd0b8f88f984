#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mitodet {

// 8-bit RGB image, row-major, no alpha.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // size = width * height * 3

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), pixels(size_t(w) * h * 3, 0) {}

  uint8_t* px(int x, int y) { return pixels.data() + 3 * (size_t(y) * width + x); }
  const uint8_t* px(int x, int y) const {
    return pixels.data() + 3 * (size_t(y) * width + x);
  }
};

ImageU8 read_png(const std::filesystem::path& file);
void write_png(const std::filesystem::path& file, const ImageU8& img);

// Reads only the IHDR header; cheap existence/dimension check.
void read_png_size(const std::filesystem::path& file, int& width, int& height);

// Mirror index without edge repetition: -1 -> 1, n -> n-2.
// Valid for |overshoot| <= n-1.
int reflect_index(int i, int n);

// Crop with reflect padding for out-of-bounds regions.
ImageU8 crop_reflect(const ImageU8& img, int x0, int y0, int w, int h);

// 90-degree counter-clockwise rotation.
ImageU8 rot90_ccw(const ImageU8& img);

}  // namespace mitodet

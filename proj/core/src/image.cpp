#include "mitodet/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>

#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail_io(const std::filesystem::path& file, const char* what) {
  throw IoError(std::string(what) + ": " + file.string());
}

}  // namespace

ImageU8 read_png(const std::filesystem::path& file) {
  FilePtr fp(fopen(file.string().c_str(), "rb"));
  if (!fp) fail_io(file, "cannot open PNG");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail_io(file, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail_io(file, "png_create_info_struct failed");
  }
  ImageU8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_io(file, "corrupt PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);

  // Normalize everything to 8-bit RGB.
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.pixels.resize(size_t(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = img.pixels.data() + size_t(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void read_png_size(const std::filesystem::path& file, int& width, int& height) {
  FilePtr fp(fopen(file.string().c_str(), "rb"));
  if (!fp) fail_io(file, "cannot open PNG");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail_io(file, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail_io(file, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_io(file, "corrupt PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  png_destroy_read_struct(&png, &info, nullptr);
}

void write_png(const std::filesystem::path& file, const ImageU8& img) {
  if (img.width <= 0 || img.height <= 0)
    throw ValidationError("write_png: empty image");
  FilePtr fp(fopen(file.string().c_str(), "wb"));
  if (!fp) fail_io(file, "cannot open PNG for writing");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail_io(file, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail_io(file, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail_io(file, "PNG write failed");
  }
  png_init_io(png, fp.get());
  // Fixed settings keep output bytes reproducible for identical pixels.
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.px(0, y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

int reflect_index(int i, int n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * n - 2 - i;
  if (i < 0 || i >= n)
    throw ValidationError("reflect_index: overshoot exceeds image size");
  return i;
}

ImageU8 crop_reflect(const ImageU8& img, int x0, int y0, int w, int h) {
  ImageU8 out(w, h);
  for (int y = 0; y < h; ++y) {
    int sy = reflect_index(y0 + y, img.height);
    for (int x = 0; x < w; ++x) {
      int sx = reflect_index(x0 + x, img.width);
      std::memcpy(out.px(x, y), img.px(sx, sy), 3);
    }
  }
  return out;
}

ImageU8 rot90_ccw(const ImageU8& img) {
  ImageU8 out(img.height, img.width);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      // out(row r, col c) = in(row c, col W-1-r)
      std::memcpy(out.px(x, y), img.px(img.width - 1 - y, x), 3);
    }
  }
  return out;
}

}  // namespace mitodet

#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "drseg/tensor.hpp"

namespace drseg {

// 8-bit PNG read/write. Images are HxWx3 tensors in [0,1]; masks are 8-bit
// gray files restricted to {0,255}.

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png_rgb(const std::string& path, const Tensor& image) {
  if (image.c != 3) throw std::invalid_argument("write_png_rgb: expected 3 channels");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png_rgb: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png_rgb: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.w, image.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(image.w) * 3);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = image.at(y, x, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        row[x * 3 + c] = static_cast<png_byte>(v * 255.0 + 0.5);
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_png_mask(const std::string& path, const Mask& mask) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png_mask: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png_mask: libpng failure for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, mask.w, mask.h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(mask.w);
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) row[x] = mask.at(y, x) ? 255 : 0;
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace detail {

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FilePtr fp;
  int h = 0, w = 0;
  std::vector<std::vector<png_byte>> rows;

  explicit PngReader(const std::string& path) {
    fp.reset(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("read_png: cannot open " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
      throw std::runtime_error("read_png: not a PNG file: " + path);
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw std::runtime_error("read_png: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    rows.assign(h, std::vector<png_byte>(rowbytes));
    std::vector<png_bytep> ptrs(h);
    for (int y = 0; y < h; ++y) ptrs[y] = rows[y].data();
    png_read_image(png, ptrs.data());
    png_read_end(png, nullptr);
  }

  int channels() const { return static_cast<int>(rows[0].size()) / w; }

  ~PngReader() {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
  }
};

}  // namespace detail

inline Tensor read_png_rgb(const std::string& path) {
  detail::PngReader r(path);
  Tensor t(r.h, r.w, 3);
  const int ch = r.channels();
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const png_byte b = ch == 1 ? r.rows[y][x] : r.rows[y][x * ch + std::min(c, ch - 1)];
        t.at(y, x, c) = b / 255.0;
      }
  return t;
}

// Reads a mask file; values other than {0,255} are rejected so silently
// antialiased masks cannot sneak in.
inline Mask read_png_mask(const std::string& path) {
  detail::PngReader r(path);
  const int ch = r.channels();
  Mask m(r.h, r.w);
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x) {
      const png_byte b = r.rows[y][x * ch];
      if (b != 0 && b != 255)
        throw std::runtime_error("read_png_mask: " + path + " has value " + std::to_string(b) +
                                 "; masks must be binary {0,255} (threshold it first)");
      m.at(y, x) = b ? 1 : 0;
    }
  return m;
}

}  // namespace drseg

// Copyright 2026 The DyNCA Engine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// PNG reading and writing through libpng. Requires linking libpng.

#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dynca/common.hpp"
#include "dynca/image.hpp"

namespace dynca {

class ImageIoError : public Error {
 public:
  using Error::Error;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp, png_const_charp msg) { throw ImageIoError(std::string("libpng: ") + msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

inline void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}
inline void png_flush_noop(png_structp) {}
}  // namespace detail

/// Encodes an RGB8 image as PNG bytes. Output is a pure function of the
/// pixels (no timestamps or text chunks).
inline std::vector<std::uint8_t> encode_png(const Rgb8Image& img) {
  require_shape(img.width > 0 && img.height > 0, "encode_png: empty image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                            detail::png_warning_fn);
  if (!png) throw ImageIoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  try {
    if (!info) throw ImageIoError("png_create_info_struct failed");
    png_set_write_fn(png, &out, detail::png_append, detail::png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r)
      png_write_row(png, const_cast<png_bytep>(img.at(r, 0)));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline void write_png(const std::string& path, const Rgb8Image& img) {
  const auto bytes = encode_png(img);
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ImageIoError("cannot open " + path + " for writing");
  if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
    throw ImageIoError("short write to " + path);
}

/// Reads any 8/16-bit PNG and converts it to RGB8 (alpha dropped, gray
/// expanded).
inline Rgb8Image read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ImageIoError("cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageIoError(path + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                           detail::png_warning_fn);
  if (!png) throw ImageIoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  Rgb8Image img;
  try {
    if (!info) throw ImageIoError("png_create_info_struct failed");
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img = Rgb8Image(static_cast<int>(png_get_image_width(png, info)),
                    static_cast<int>(png_get_image_height(png, info)));
    if (png_get_rowbytes(png, info) != static_cast<png_size_t>(img.width) * 3)
      throw ImageIoError(path + ": unexpected row layout after conversion");
    for (int r = 0; r < img.height; ++r) png_read_row(png, img.at(r, 0), nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Numbered PNG frames of a directory, in lexicographic filename order.
inline std::vector<Rgb8Image> read_png_sequence(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ImageIoError(dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Rgb8Image> frames;
  for (const auto& p : files) frames.push_back(read_png(p.string()));
  return frames;
}

}  // namespace dynca

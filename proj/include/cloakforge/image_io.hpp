#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloakforge/tensor.hpp"

namespace cloakforge {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// 8-bit PNG, 1 or 3 channels; values are clamped to [0, 1] and rounded.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  const Shape s = img.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ImageIoError("write_png: expected (1, 1|3, H, W), got " + s.str());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw ImageIoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng error writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, s.w, s.h, 8, s.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header fields keep output byte-identical across runs.
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(s.w) * s.c);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c) row[x * s.c + c] = to_u8(img.at(0, c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8-bit PNG; expands palette/gray-alpha and drops alpha. Returns
// (1, C, H, W) in [0, 1] with C = 1 for grayscale sources and 3 otherwise.
inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw ImageIoError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng error reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int ch = png_get_channels(png, info);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * ch);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * ch;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  const int out_c = ch >= 3 ? 3 : 1;
  Image img(Shape{1, out_c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < out_c; ++c) img.at(0, c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * ch + c] / 255.0f;
  return img;
}

// Simulates the 8-bit save/load round trip in memory.
inline Image quantize_u8(const Image& img) {
  Image out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = to_u8(img[i]) / 255.0f;
  return out;
}

inline Image to_channels(const Image& img, int channels) {
  const Shape s = img.shape();
  if (s.c == channels) return img;
  Image out(Shape{1, channels, s.h, s.w});
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (channels == 1) {
        float acc = 0;
        for (int c = 0; c < s.c; ++c) acc += img.at(0, c, y, x);
        out.at(0, 0, y, x) = acc / s.c;
      } else {
        for (int c = 0; c < channels; ++c) out.at(0, c, y, x) = img.at(0, std::min(c, s.c - 1), y, x);
      }
    }
  return out;
}

// Largest centered square crop, then area-weighted resampling to size x size.
inline Image center_crop_resize(const Image& img, int size) {
  const Shape s = img.shape();
  const int side = std::min(s.h, s.w);
  const int y0 = (s.h - side) / 2, x0 = (s.w - side) / 2;
  Image out(Shape{1, s.c, size, size});
  const double scale = static_cast<double>(side) / size;
  for (int c = 0; c < s.c; ++c) {
    for (int oy = 0; oy < size; ++oy) {
      for (int ox = 0; ox < size; ++ox) {
        const double ya = oy * scale, yb = (oy + 1) * scale;
        const double xa = ox * scale, xb = (ox + 1) * scale;
        double acc = 0, wsum = 0;
        for (int y = static_cast<int>(ya); y < std::min(side, static_cast<int>(std::ceil(yb))); ++y) {
          const double wy = std::min<double>(y + 1, yb) - std::max<double>(y, ya);
          for (int x = static_cast<int>(xa); x < std::min(side, static_cast<int>(std::ceil(xb))); ++x) {
            const double wx = std::min<double>(x + 1, xb) - std::max<double>(x, xa);
            acc += wy * wx * img.at(0, c, y0 + y, x0 + x);
            wsum += wy * wx;
          }
        }
        out.at(0, c, oy, ox) = static_cast<float>(acc / wsum);
      }
    }
  }
  return out;
}

// Tiles equally sized images into a grid with a 2-pixel white gutter.
inline Image image_grid(const std::vector<Image>& images, int cols) {
  if (images.empty()) throw ImageIoError("image_grid: no images");
  const Shape s = images.front().shape();
  cols = std::max(1, std::min(cols, static_cast<int>(images.size())));
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  const int gap = 2;
  Image grid(Shape{1, s.c, rows * (s.h + gap) + gap, cols * (s.w + gap) + gap}, 1.0f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int oy = gap + static_cast<int>(i) / cols * (s.h + gap), ox = gap + static_cast<int>(i) % cols * (s.w + gap);
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) grid.at(0, c, oy + y, ox + x) = images[i].at(0, c, y, x);
  }
  return grid;
}

// NumPy .npy (format 1.0, little-endian, C order) with a 4-D NCHW shape.
template <class S>
void write_npy(const std::filesystem::path& path, const Tensor<S>& t) {
  const Shape s = t.shape();
  std::ostringstream h;
  h << "{'descr': '<" << (std::is_same_v<S, float> ? "f4" : "f8") << "', 'fortran_order': False, 'shape': (" << s.n
    << ", " << s.c << ", " << s.h << ", " << s.w << "), }";
  std::string header = h.str();
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const std::uint16_t hlen = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
}

template <class S>
Tensor<S> read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 6) != "\x93NUMPY") throw ImageIoError(path.string() + " is not a .npy file");
  std::uint16_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 2);
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  const std::string want = std::is_same_v<S, float> ? "<f4" : "<f8";
  if (header.find(want) == std::string::npos) throw ImageIoError(path.string() + ": unexpected dtype");
  auto open = header.find("'shape': (");
  auto close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw ImageIoError(path.string() + ": bad header");
  std::string dims = header.substr(open + 10, close - open - 10);
  std::vector<int> d;
  std::stringstream ss(dims);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(' ') != std::string::npos) d.push_back(std::stoi(item));
  }
  while (d.size() < 4) d.insert(d.begin(), 1);
  Tensor<S> t(Shape{d[0], d[1], d[2], d[3]});
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
  if (!in) throw ImageIoError(path.string() + ": truncated data");
  return t;
}

}  // namespace cloakforge

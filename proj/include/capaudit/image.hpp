#pragma once

// Image and mask buffers plus the handful of raster operations the
// perturbation and diagnostics code needs.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "capaudit/error.hpp"

namespace capaudit {

// RGB image, channel-interleaved, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> px;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), px(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * 3 + c;
  }
  double& at(int x, int y, int c) { return px[index(x, y, c)]; }
  double at(int x, int y, int c) const { return px[index(x, y, c)]; }
  bool operator==(const Image&) const = default;
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h, bool fill = false)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v = true) {
    bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
  }
  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t area() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool operator==(const Mask&) const = default;
};

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Pixels whose centers fall inside the box: x in [x0, x1), y in [y0, y1).
inline Mask box_mask(const Box& b, int width, int height) {
  Mask m(width, height);
  const int x0 = std::max(0, static_cast<int>(std::ceil(b.x0 - 0.5)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(b.y0 - 0.5)));
  const int x1 = std::min(width, static_cast<int>(std::ceil(b.x1 - 0.5)));
  const int y1 = std::min(height, static_cast<int>(std::ceil(b.y1 - 0.5)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y);
  return m;
}

struct Point {
  double x = 0, y = 0;
};

inline Point centroid(const Mask& m) {
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        sx += x;
        sy += y;
        n += 1;
      }
  if (n == 0) throw DegenerateRegion("centroid of empty mask");
  return {sx / n, sy / n};
}

inline Mask mask_union(const Mask& a, const Mask& b) {
  Mask out = a;
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = a.bits[i] | b.bits[i];
  return out;
}

inline Mask mask_minus(const Mask& a, const Mask& b) {
  Mask out = a;
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = a.bits[i] & !b.bits[i];
  return out;
}

inline Mask mask_not(const Mask& a) {
  Mask out = a;
  for (auto& v : out.bits) v = !v;
  return out;
}

namespace detail {

// One-dimensional squared distance transform (lower envelope of parabolas).
// Background samples carry a large finite sentinel rather than infinity so
// the intersection arithmetic stays well defined.
inline constexpr double kFar = 1e20;

inline void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto meet = [&](int q, int p) {
    return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
  };
  for (int q = 1; q < n; ++q) {
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Squared Euclidean distance from every pixel to the nearest set pixel of
// `m` (0 on set pixels, +inf everywhere when `m` is empty).
inline std::vector<double> squared_distance_to(const Mask& m) {
  const int w = m.width, h = m.height;
  std::vector<double> grid(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = m.bits[i] ? 0.0 : detail::kFar;
  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> f(std::max(w, h)), d(std::max(w, h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    detail::edt_1d(f.data(), d.data(), h, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = grid.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    detail::edt_1d(f.data(), d.data(), w, v, z);
    std::copy(d.begin(), d.begin() + w, row);
  }
  for (auto& g : grid)
    if (g >= detail::kFar / 2) g = std::numeric_limits<double>::infinity();
  return grid;
}

// Morphology with a Euclidean disc of radius r.
inline Mask dilate(const Mask& m, double r) {
  const auto dist = squared_distance_to(m);
  Mask out(m.width, m.height);
  for (std::size_t i = 0; i < dist.size(); ++i) out.bits[i] = dist[i] <= r * r ? 1 : 0;
  return out;
}

inline Mask erode(const Mask& m, double r) { return mask_not(dilate(mask_not(m), r)); }

// Half-sample symmetric reflection into [0, n): ... 1 0 | 0 1 ... n-1 | n-1 ...
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Sobel gradient magnitude averaged over channels, reflect border.
inline std::vector<double> sobel_magnitude(const Image& img) {
  const int w = img.width, h = img.height;
  std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y) {
    const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
    for (int x = 0; x < w; ++x) {
      const int xm = reflect_index(x - 1, w), xp = reflect_index(x + 1, w);
      double acc = 0;
      for (int c = 0; c < 3; ++c) {
        const double gx = (img.at(xp, ym, c) + 2 * img.at(xp, y, c) + img.at(xp, yp, c)) -
                          (img.at(xm, ym, c) + 2 * img.at(xm, y, c) + img.at(xm, yp, c));
        const double gy = (img.at(xm, yp, c) + 2 * img.at(x, yp, c) + img.at(xp, yp, c)) -
                          (img.at(xm, ym, c) + 2 * img.at(x, ym, c) + img.at(xp, ym, c));
        acc += std::sqrt(gx * gx + gy * gy);
      }
      out[static_cast<std::size_t>(y) * w + x] = acc / 3.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG I/O. Images are stored as 8-bit RGB; masks as 8-bit grayscale (0/255).

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  ~PngFile() {
    if (f) std::fclose(f);
  }
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  throw IoError(std::string("png: ") + msg + " (" +
                static_cast<const char*>(png_get_error_ptr(png)) + ")");
}

inline void png_warning_fn(png_structp, png_const_charp) {}

inline std::vector<std::uint8_t> read_png_rgb8(const std::string& path, int& w, int& h,
                                               bool gray) {
  PngFile file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING,
                                           const_cast<char*>(path.c_str()), png_error_fn,
                                           png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, file.f);
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (gray) {
    if (color & PNG_COLOR_MASK_COLOR || color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  } else if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<std::uint8_t> data(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = data.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return data;
}

inline void write_png_raw(const std::string& path, const std::uint8_t* data, int w, int h,
                          bool gray) {
  PngFile file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING,
                                            const_cast<char*>(path.c_str()), png_error_fn,
                                            png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, file.f);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, w, h, 8, gray ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = gray ? 1 : 3;
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * w * channels));
  png_write_end(png, nullptr);
}

}  // namespace detail

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<std::uint8_t> to_rgb8(const Image& img) {
  std::vector<std::uint8_t> out(img.px.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_byte(img.px[i]);
  return out;
}

inline Image from_rgb8(const std::vector<std::uint8_t>& data, int w, int h) {
  Image img(w, h);
  for (std::size_t i = 0; i < img.px.size(); ++i) img.px[i] = data[i] / 255.0;
  return img;
}

// Round every sample to the 8-bit grid that PNG storage uses.
inline Image quantize(const Image& img) {
  Image out = img;
  for (auto& v : out.px) v = to_byte(v) / 255.0;
  return out;
}

inline Image read_png(const std::string& path) {
  int w = 0, h = 0;
  const auto data = detail::read_png_rgb8(path, w, h, false);
  return from_rgb8(data, w, h);
}

inline void write_png(const std::string& path, const Image& img) {
  const auto data = to_rgb8(img);
  detail::write_png_raw(path, data.data(), img.width, img.height, false);
}

inline Mask read_mask_png(const std::string& path) {
  int w = 0, h = 0;
  const auto data = detail::read_png_rgb8(path, w, h, true);
  Mask m(w, h);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = data[i] >= 128 ? 1 : 0;
  return m;
}

inline void write_mask_png(const std::string& path, const Mask& m) {
  std::vector<std::uint8_t> data(m.bits.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = m.bits[i] ? 255 : 0;
  detail::write_png_raw(path, data.data(), m.width, m.height, true);
}

// Width and height from the PNG header without decoding pixels.
inline std::pair<int, int> png_size(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  unsigned char header[24];
  const std::size_t got = std::fread(header, 1, sizeof header, f);
  std::fclose(f);
  if (got != sizeof header || png_sig_cmp(header, 0, 8) != 0)
    throw IoError("not a PNG file: " + path);
  auto be32 = [&](int off) {
    return (static_cast<std::uint32_t>(header[off]) << 24) |
           (static_cast<std::uint32_t>(header[off + 1]) << 16) |
           (static_cast<std::uint32_t>(header[off + 2]) << 8) | header[off + 3];
  };
  return {static_cast<int>(be32(16)), static_cast<int>(be32(20))};
}

}  // namespace capaudit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sureid/errors.hpp"

namespace sureid {

/// RGB image, channel-major float in [0,1]. All fixtures are binary (P6)
/// portable pixmaps with maxval 255.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // [3 * height * width], CHW

  Image() = default;
  Image(int h, int w, float fill = 0.f) : height(h), width(w), data(3u * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  bool empty() const { return data.empty(); }
};

namespace ppm {

inline int read_token(std::istream& in) {
  // P6 header tokens, '#' comments allowed.
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v;
  if (!(in >> v)) throw std::runtime_error("ppm: malformed header token");
  return v;
}

inline Image read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error("ppm: not a P6 file: " + path);
  const int w = read_token(in);
  const int h = read_token(in);
  const int maxval = read_token(in);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("ppm: unsupported dimensions/maxval in " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(3u * w * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error("ppm: truncated pixel data in " + path);
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = raw[3u * (static_cast<size_t>(y) * w + x) + c] / 255.f;
  return img;
}

inline void write(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ppm: cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(3u * img.width * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
        raw[3u * (static_cast<size_t>(y) * img.width + x) + c] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace ppm

/// Bilinear resize to (h, w).
inline Image resize_bilinear(const Image& src, int h, int w) {
  if (src.height == h && src.width == w) return src;
  Image dst(h, w);
  const float sy = h > 1 ? static_cast<float>(src.height - 1) / (h - 1) : 0.f;
  const float sx = w > 1 ? static_cast<float>(src.width - 1) / (w - 1) : 0.f;
  for (int y = 0; y < h; ++y) {
    const float fy = y * sy;
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const float wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      const float fx = x * sx;
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const float wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const float a = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
        const float b = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
        dst.at(c, y, x) = a * (1 - wy) + b * wy;
      }
    }
  }
  return dst;
}

/// Copies `patch` into `dst` with its top-left corner at (top, left).
/// The patch must fit; pixels outside the rectangle are untouched.
inline void paste(Image& dst, const Image& patch, int top, int left) {
  if (top < 0 || left < 0 || top + patch.height > dst.height || left + patch.width > dst.width)
    throw ContractError("paste: patch does not fit inside destination");
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < patch.height; ++y)
      for (int x = 0; x < patch.width; ++x) dst.at(c, top + y, left + x) = patch.at(c, y, x);
}

inline Image crop(const Image& src, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > src.height || left + w > src.width)
    throw ContractError("crop: rectangle out of bounds");
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = src.at(c, top + y, left + x);
  return out;
}

inline Image pad_zero(const Image& src, int pad) {
  Image out(src.height + 2 * pad, src.width + 2 * pad, 0.f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) out.at(c, pad + y, pad + x) = src.at(c, y, x);
  return out;
}

inline Image hflip(const Image& src) {
  Image out(src.height, src.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) out.at(c, y, x) = src.at(c, y, src.width - 1 - x);
  return out;
}

}  // namespace sureid

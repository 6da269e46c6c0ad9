#pragma once

// 64-bit difference hash.
//   1. decode to RGB, luma = round(0.299 R + 0.587 G + 0.114 B) in integers
//   2. bilinear resample to 9 x 8 (pixel-center aligned, edge-clamped),
//      kept in double precision
//   3. bit(r, c) = px[r][c] > px[r][c+1]; ties give 0
//   4. packed row-major, most significant bit first

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "zsr/image.hpp"

namespace zsr {

struct DHash64 {
  std::uint64_t bits = 0;
  bool operator==(const DHash64&) const = default;
};

inline int hamming_distance(DHash64 a, DHash64 b) { return std::popcount(a.bits ^ b.bits); }

inline std::vector<std::uint8_t> luma(const RgbImage& img) {
  std::vector<std::uint8_t> out(img.width * img.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned r = img.pixels[i * 3], g = img.pixels[i * 3 + 1], b = img.pixels[i * 3 + 2];
    out[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return out;
}

/// Bilinear sample grid of `out_w` x `out_h` values, source coordinate
/// (i + 0.5) * in / out - 0.5 clamped to the image.
inline std::vector<double> resize_bilinear(const std::vector<std::uint8_t>& gray, std::size_t w, std::size_t h,
                                           std::size_t out_w, std::size_t out_h) {
  auto axis = [](std::size_t i, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  std::vector<double> out(out_w * out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    axis(y, h, out_h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      axis(x, w, out_w, x0, x1, fx);
      const double top = (1.0 - fx) * gray[y0 * w + x0] + fx * gray[y0 * w + x1];
      const double bottom = (1.0 - fx) * gray[y1 * w + x0] + fx * gray[y1 * w + x1];
      out[y * out_w + x] = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

inline DHash64 dhash(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) throw Error("dhash: empty image");
  const auto px = resize_bilinear(luma(img), img.width, img.height, 9, 8);
  DHash64 h;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      h.bits = (h.bits << 1) | (px[r * 9 + c] > px[r * 9 + c + 1] ? 1u : 0u);
    }
  }
  return h;
}

inline DHash64 dhash(std::string_view image_bytes) { return dhash(decode_image(image_bytes)); }

inline std::string to_hex(DHash64 h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h.bits & 0xf];
    h.bits >>= 4;
  }
  return s;
}

inline DHash64 dhash_from_hex(std::string_view s) {
  if (s.size() != 16) throw Error("dhash hex must have 16 digits");
  DHash64 h;
  for (char c : s) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else throw Error("invalid hex digit in dhash");
    h.bits = (h.bits << 4) | static_cast<std::uint64_t>(v);
  }
  return h;
}

}  // namespace zsr

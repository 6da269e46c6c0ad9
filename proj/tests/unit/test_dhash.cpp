#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "zsr/dhash.hpp"

using namespace zsr;

namespace {

RgbImage gray(std::size_t w, std::size_t h, const std::function<int(std::size_t, std::size_t)>& f) {
  RgbImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(w * h * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto v = static_cast<std::uint8_t>(std::clamp(f(x, y), 0, 255));
      for (int c = 0; c < 3; ++c) img.pixels[(y * w + x) * 3 + c] = v;
    }
  }
  return img;
}

RgbImage remap(RgbImage img, const std::function<int(int)>& f) {
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(f(p));
  return img;
}

}  // namespace

TEST(DHash, UniformIsZero) {
  EXPECT_EQ(dhash(gray(40, 30, [](auto, auto) { return 128; })).bits, 0u);
}

TEST(DHash, GradientsGiveAllOnesOrZeros) {
  EXPECT_EQ(dhash(gray(90, 16, [](auto x, auto) { return 250 - int(x) * 2; })).bits, ~std::uint64_t{0});
  EXPECT_EQ(dhash(gray(90, 16, [](auto x, auto) { return int(x) * 2; })).bits, 0u);
}

TEST(DHash, LosslessReencodeIdentical) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255);
  RgbImage img;
  img.width = 37;
  img.height = 23;
  for (std::size_t i = 0; i < img.width * img.height * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(byte(rng)));
  const auto png = encode_png(img);
  const auto ppm = encode_ppm(img);
  EXPECT_NE(png, ppm);
  EXPECT_EQ(hamming_distance(dhash(png), dhash(ppm)), 0);
  EXPECT_EQ(hamming_distance(dhash(png), dhash(encode_png(decode_image(png)))), 0);
}

TEST(DHash, MonotoneRemapOnAlignedGrid) {
  // 45 x 40 puts every resample point on a pixel center.
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> level(0, 84);
    std::vector<int> values(45 * 40);
    for (auto& v : values) v = level(rng);
    const auto img = gray(45, 40, [&](auto x, auto y) { return values[y * 45 + x]; });
    const auto base = dhash(img);
    EXPECT_EQ(dhash(remap(img, [](int v) { return 3 * v; })), base);
    EXPECT_EQ(dhash(remap(img, [](int v) { return v + v * v / 42; })), base);
    EXPECT_EQ(dhash(remap(img, [](int v) { return 100 + v; })), base);
  }
}

TEST(DHash, MonotoneRemapOnBlockImages) {
  // Constant 7 x 5 blocks: resampling never mixes neighbouring blocks.
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> level(0, 120);
  std::vector<int> blocks(9 * 8);
  for (auto& v : blocks) v = level(rng);
  const auto img = gray(63, 40, [&](auto x, auto y) { return blocks[(y / 5) * 9 + x / 7]; });
  EXPECT_EQ(dhash(remap(img, [](int v) { return 2 * v + 5; })), dhash(img));
}

TEST(DHash, JpegQuality90NearDuplicate) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> slope(1.5, 3.0), tilt(-1.0, 1.0), phase(0.0, 6.28);
    const double a = slope(rng) * (seed % 2 ? 1.0 : -1.0), b = tilt(rng), ph = phase(rng);
    RgbImage img;
    img.width = 96;
    img.height = 64;
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        const double base = 128 + a * (double(x) - 48) + b * (double(y) - 32);
        const double wave = 6.0 * std::sin(double(y) / 9.0 + ph);
        img.pixels.push_back(static_cast<std::uint8_t>(std::clamp(base + wave, 0.0, 255.0)));
        img.pixels.push_back(static_cast<std::uint8_t>(std::clamp(base * 0.8 + 20, 0.0, 255.0)));
        img.pixels.push_back(static_cast<std::uint8_t>(std::clamp(255 - base, 0.0, 255.0)));
      }
    }
    const auto d = hamming_distance(dhash(encode_png(img)), dhash(encode_jpeg(img, 90)));
    EXPECT_LE(d, 2) << "seed " << seed;
  }
}

TEST(DHash, HammingExamples) {
  const DHash64 a{0x0123456789abcdefULL};
  EXPECT_EQ(hamming_distance(a, a), 0);
  EXPECT_EQ(hamming_distance(a, DHash64{~a.bits}), 64);
  EXPECT_EQ(hamming_distance(DHash64{0xFF00000000000000ULL}, DHash64{0x0F00000000000000ULL}), 4);
}

TEST(DHash, HexRoundTrip) {
  const DHash64 a{0x00ff10a0beef0001ULL};
  EXPECT_EQ(to_hex(a), "00ff10a0beef0001");
  EXPECT_EQ(dhash_from_hex(to_hex(a)), a);
  EXPECT_EQ(dhash_from_hex("00FF10A0BEEF0001"), a);
  EXPECT_THROW(dhash_from_hex("abc"), Error);
  EXPECT_THROW(dhash_from_hex("zzzzzzzzzzzzzzzz"), Error);
}

TEST(DHash, Undecodable) {
  EXPECT_THROW(dhash(std::string_view("not an image")), Error);
  EXPECT_THROW(dhash(std::string_view("\x89PNG\r\n\x1a\n broken", 15)), Error);
}

#pragma once

// In-memory images and binary PGM/PPM (P5/P6, maxval 255) I/O.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace uolo {

/// Planar [C,H,W] image with values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0);

  double& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Binary mask, one byte per pixel holding 0 or 1.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

/// Rounds every value to the nearest multiple of 1/255 (the on-disk grid).
void quantize(Image& image);

/// Integer luma (ITU-R BT.601 weights) or the single channel, as bytes.
std::vector<std::uint8_t> to_gray_bytes(const Image& image);

Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& image);

/// Masks are stored as P5 with 0 / 255; any nonzero byte reads as 1.
Mask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Mask& mask);

}  // namespace uolo

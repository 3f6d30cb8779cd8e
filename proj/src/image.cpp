#include "uolo/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "uolo/errors.hpp"

namespace uolo {

Image::Image(int w, int h, int c, double fill)
    : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string token;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
      if (!token.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(ch);
  }
  return token;
}

struct RawPnm {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> bytes;  // interleaved
};

RawPnm read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  const std::string magic = header_token(in);
  RawPnm raw;
  if (magic == "P5") {
    raw.channels = 1;
  } else if (magic == "P6") {
    raw.channels = 3;
  } else {
    throw DataError(path.string() + ": unsupported image format '" + magic + "' (need P5/P6)");
  }
  try {
    raw.width = std::stoi(header_token(in));
    raw.height = std::stoi(header_token(in));
    const int maxval = std::stoi(header_token(in));
    if (maxval != 255) throw DataError(path.string() + ": max value must be 255");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed header");
  }
  if (raw.width <= 0 || raw.height <= 0) throw DataError(path.string() + ": bad dimensions");
  raw.bytes.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
  in.read(reinterpret_cast<char*>(raw.bytes.data()), static_cast<std::streamsize>(raw.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.bytes.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  return raw;
}

void write_raw(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing image " + path.string());
}

}  // namespace

void quantize(Image& image) {
  for (double& v : image.pixels) v = to_byte(v) / 255.0;
}

std::vector<std::uint8_t> to_gray_bytes(const Image& image) {
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  std::vector<std::uint8_t> gray(n);
  if (image.channels == 1) {
    for (std::size_t i = 0; i < n; ++i) gray[i] = to_byte(image.pixels[i]);
    return gray;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int r = to_byte(image.pixels[i]);
    const int g = to_byte(image.pixels[n + i]);
    const int b = to_byte(image.pixels[2 * n + i]);
    gray[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return gray;
}

Image read_pnm(const std::filesystem::path& path) {
  const RawPnm raw = read_raw(path);
  Image image(raw.width, raw.height, raw.channels);
  const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < raw.channels; ++c) {
      image.pixels[static_cast<std::size_t>(c) * n + i] =
          raw.bytes[i * static_cast<std::size_t>(raw.channels) + static_cast<std::size_t>(c)] / 255.0;
    }
  }
  return image;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("write_pnm: only 1 or 3 channels are supported");
  }
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  std::vector<std::uint8_t> bytes(n * static_cast<std::size_t>(image.channels));
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < image.channels; ++c) {
      bytes[i * static_cast<std::size_t>(image.channels) + static_cast<std::size_t>(c)] =
          to_byte(image.pixels[static_cast<std::size_t>(c) * n + i]);
    }
  }
  write_raw(path, image.width, image.height, image.channels, bytes);
}

Mask read_mask(const std::filesystem::path& path) {
  const RawPnm raw = read_raw(path);
  if (raw.channels != 1) throw DataError(path.string() + ": masks must be single-channel P5");
  Mask mask(raw.width, raw.height);
  for (std::size_t i = 0; i < raw.bytes.size(); ++i) mask.bits[i] = raw.bytes[i] ? 1 : 0;
  return mask;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.bits.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.bits[i] ? 255 : 0;
  write_raw(path, mask.width, mask.height, 1, bytes);
}

}  // namespace uolo

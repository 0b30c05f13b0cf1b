#include "mbd/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mbd/errors.hpp"

namespace mbd {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

void write_png(const std::string& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels) {
  if (width <= 0 || height <= 0) throw ConfigError("png: bad dimensions");
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
    throw ConfigError("png: pixel buffer size mismatch");

  // scanlines with filter byte 0
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * channels));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * width * channels;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * channels);
  }

  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(comp_size);
  if (compress2(compressed.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: zlib compression failed");
  compressed.resize(comp_size);

  std::vector<std::uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);            // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(file, "IHDR", ihdr);
  append_chunk(file, "IDAT", compressed);
  append_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!out) throw IoError("write failed: " + path);
}

} // namespace

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels) {
  write_png(path, width, height, 1, pixels);
}

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels) {
  write_png(path, width, height, 3, pixels);
}

void write_slice_png_gray(const std::string& path, const Volume& slice) {
  if (slice.dims[2] != 1) throw ConfigError("png export expects a 2D slice");
  const int w = slice.dims[0], h = slice.dims[1];
  float lo = slice.data[0], hi = slice.data[0];
  const std::size_t n = slice.voxels_per_channel();
  for (std::size_t i = 0; i < n; ++i) {
    lo = std::min(lo, slice.data[i]);
    hi = std::max(hi, slice.data[i]);
  }
  const float span = hi > lo ? hi - lo : 1.0f;
  std::vector<std::uint8_t> px(n);
  for (std::size_t i = 0; i < n; ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(255.0f * (slice.data[i] - lo) / span));
  write_png_gray8(path, w, h, px);
}

void write_slice_png_diverging(const std::string& path, const Volume& slice) {
  if (slice.dims[2] != 1) throw ConfigError("png export expects a 2D slice");
  const int w = slice.dims[0], h = slice.dims[1];
  const std::size_t n = slice.voxels_per_channel();
  float amax = 0.0f;
  for (std::size_t i = 0; i < n; ++i) amax = std::max(amax, std::abs(slice.data[i]));
  if (amax == 0.0f) amax = 1.0f;
  std::vector<std::uint8_t> px(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const float v = slice.data[i] / amax; // [-1,1]
    const auto mag = static_cast<std::uint8_t>(std::lround(255.0f * std::min(1.0f, std::abs(v))));
    px[3 * i + 0] = v < 0 ? mag : 0; // red: negative
    px[3 * i + 1] = v > 0 ? mag : 0; // green: positive
    px[3 * i + 2] = 0;
  }
  write_png_rgb8(path, w, h, px);
}

} // namespace mbd

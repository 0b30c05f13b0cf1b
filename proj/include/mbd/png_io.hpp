#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbd/volume.hpp"

namespace mbd {

// Minimal PNG output (8-bit gray / RGB, zlib-compressed). Enough for map
// exports; reading is out of scope.
void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);
void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels);

// Grayscale rendering of a 2D slice (channel 0), min..max stretched to 0..255.
void write_slice_png_gray(const std::string& path, const Volume& slice);

// Diverging rendering of a signed 2D map: positive values in green,
// negative in red, scaled by the maximum absolute value.
void write_slice_png_diverging(const std::string& path, const Volume& slice);

} // namespace mbd

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace mbd {

enum class Axis { X, Y, Z };

Axis axis_from_string(const std::string& s);

// Dense 3D scalar field, optionally multi-channel. Data is stored
// channel-major (one contiguous block per channel) with x fastest.
// Values are float32 at rest; computation pipelines accumulate in double
// and write back once.
struct Volume {
  std::array<int, 3> dims{0, 0, 0};            // nx, ny, nz
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0}; // mm
  int channels = 1;
  std::vector<float> data;
  std::vector<std::string> labels; // optional per-channel semantic labels

  Volume() = default;
  Volume(std::array<int, 3> d, int nchan, float fill = 0.0f);

  std::size_t voxels_per_channel() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t size() const { return voxels_per_channel() * channels; }

  std::size_t index(int c, int x, int y, int z) const {
    return ((static_cast<std::size_t>(c) * dims[2] + z) * dims[1] + y) * static_cast<std::size_t>(dims[0]) + x;
  }
  float& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
  float at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }

  const float* channel_ptr(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels_per_channel(); }
  float* channel_ptr(int c) { return data.data() + static_cast<std::size_t>(c) * voxels_per_channel(); }

  // Throws NumericError on non-finite values, ConfigError on shape problems.
  void validate() const;

  bool same_grid(const Volume& other) const {
    return dims == other.dims && voxel_size == other.voxel_size;
  }
};

// Per-voxel values in [0,1]; single channel, dims as the volumes it masks.
struct Mask {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<float> data;

  Mask() = default;
  Mask(std::array<int, 3> d, float fill = 0.0f);

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * static_cast<std::size_t>(dims[0]) + x;
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }

  void validate() const; // values in [0,1], finite
};

// On-disk pair: `<base>.f32raw` (little-endian float32) + `<base>.vhdr`
// (key-value sidecar: dims, voxel_size_mm, channels, dtype, byte_order,
// label[i]). Round-trips bit-exactly for finite data.
void save_volume(const Volume& v, const std::string& base_path);
Volume load_volume(const std::string& base_path);

// Extracts one plane perpendicular to `axis` as a 2D volume (nz == 1),
// all channels preserved. Axis order of the plane: X -> (y,z), Y -> (x,z),
// Z -> (x,y).
Volume slice_extract(const Volume& v, Axis axis, int index);

// Inverse of slicing over every index along `axis`.
Volume stack_slices(const std::vector<Volume>& slices, Axis axis,
                    const std::array<double, 3>& voxel_size);

} // namespace mbd

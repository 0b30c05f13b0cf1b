#include "mbd/volume.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"

namespace mbd {

namespace {

void check_dims_positive(const std::array<int, 3>& dims) {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw ConfigError("volume dims must be positive");
}

// Accepts `name`, `name.f32raw` or `name.vhdr` and returns `name`.
std::string strip_suffix(const std::string& path) {
  for (const char* suf : {".f32raw", ".vhdr"}) {
    const std::string s(suf);
    if (path.size() > s.size() && path.compare(path.size() - s.size(), s.size(), s) == 0)
      return path.substr(0, path.size() - s.size());
  }
  return path;
}

} // namespace

Axis axis_from_string(const std::string& s) {
  if (s == "x" || s == "X") return Axis::X;
  if (s == "y" || s == "Y") return Axis::Y;
  if (s == "z" || s == "Z") return Axis::Z;
  throw ConfigError("unknown axis: " + s);
}

Volume::Volume(std::array<int, 3> d, int nchan, float fill) : dims(d), channels(nchan) {
  check_dims_positive(d);
  if (nchan < 1) throw ConfigError("channel count must be >= 1");
  data.assign(size(), fill);
}

void Volume::validate() const {
  check_dims_positive(dims);
  if (channels < 1) throw ConfigError("channel count must be >= 1");
  if (voxel_size[0] <= 0 || voxel_size[1] <= 0 || voxel_size[2] <= 0)
    throw ConfigError("voxel sizes must be positive");
  if (data.size() != size())
    throw ConfigError("volume data length " + std::to_string(data.size()) +
                      " does not match dims*channels " + std::to_string(size()));
  for (float f : data)
    if (!std::isfinite(f)) throw NumericError("non-finite data in volume");
}

Mask::Mask(std::array<int, 3> d, float fill) : dims(d) {
  check_dims_positive(d);
  data.assign(size(), fill);
}

void Mask::validate() const {
  check_dims_positive(dims);
  if (data.size() != size()) throw ConfigError("mask data length does not match dims");
  for (float f : data) {
    if (!std::isfinite(f)) throw NumericError("non-finite data in mask");
    if (f < 0.0f || f > 1.0f) throw NumericError("mask value outside [0,1]");
  }
}

void save_volume(const Volume& v, const std::string& base_path) {
  v.validate();
  const std::string base = strip_suffix(base_path);

  KeyValueConfig hdr;
  {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d %d %d", v.dims[0], v.dims[1], v.dims[2]);
    hdr.set("dims", buf);
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", v.voxel_size[0], v.voxel_size[1], v.voxel_size[2]);
    hdr.set("voxel_size_mm", buf);
  }
  hdr.set_int("channels", v.channels);
  hdr.set("dtype", "f32le");
  hdr.set("byte_order", "little");
  for (std::size_t i = 0; i < v.labels.size(); ++i)
    hdr.set("label[" + std::to_string(i) + "]", v.labels[i]);
  write_text_file(base + ".vhdr", hdr.canonical_text());

  std::ofstream raw(base + ".f32raw", std::ios::binary);
  if (!raw) throw IoError("cannot open for writing: " + base + ".f32raw");
  raw.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!raw) throw IoError("write failed: " + base + ".f32raw");
}

Volume load_volume(const std::string& base_path) {
  const std::string base = strip_suffix(base_path);
  const KeyValueConfig hdr = KeyValueConfig::parse_file(base + ".vhdr");

  const std::string dtype = hdr.get_string("dtype");
  if (dtype != "f32le") throw IoError(base + ".vhdr: unknown dtype `" + dtype + "`");
  if (hdr.get_string_or("byte_order", "little") != "little")
    throw IoError(base + ".vhdr: unsupported byte order");

  Volume v;
  const auto dims = hdr.get_int_list("dims");
  if (dims.size() != 3) throw IoError(base + ".vhdr: dims must have 3 entries");
  v.dims = {static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2])};
  const auto vs = hdr.get_double_list("voxel_size_mm");
  if (vs.size() != 3) throw IoError(base + ".vhdr: voxel_size_mm must have 3 entries");
  v.voxel_size = {vs[0], vs[1], vs[2]};
  v.channels = static_cast<int>(hdr.get_int("channels"));
  for (int i = 0; hdr.has("label[" + std::to_string(i) + "]"); ++i)
    v.labels.push_back(hdr.get_string("label[" + std::to_string(i) + "]"));

  const std::string raw_path = base + ".f32raw";
  std::ifstream raw(raw_path, std::ios::binary | std::ios::ate);
  if (!raw) throw IoError("cannot open: " + raw_path);
  const std::size_t bytes = static_cast<std::size_t>(raw.tellg());
  const std::size_t expected = v.size() * sizeof(float);
  if (bytes != expected)
    throw IoError(raw_path + ": size mismatch, header implies " + std::to_string(expected) +
                  " bytes but file has " + std::to_string(bytes));
  raw.seekg(0);
  v.data.resize(v.size());
  raw.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(expected));
  if (!raw) throw IoError("read failed: " + raw_path);

  v.validate();
  return v;
}

Volume slice_extract(const Volume& v, Axis axis, int index) {
  v.validate();
  const int ax = static_cast<int>(axis);
  if (index < 0 || index >= v.dims[ax])
    throw ConfigError("slice index " + std::to_string(index) + " out of range for axis dim " +
                      std::to_string(v.dims[ax]));

  std::array<int, 2> plane_axes;
  switch (axis) {
    case Axis::X: plane_axes = {1, 2}; break;
    case Axis::Y: plane_axes = {0, 2}; break;
    case Axis::Z: plane_axes = {0, 1}; break;
  }
  Volume out({v.dims[plane_axes[0]], v.dims[plane_axes[1]], 1}, v.channels);
  out.voxel_size = {v.voxel_size[plane_axes[0]], v.voxel_size[plane_axes[1]], v.voxel_size[ax]};
  out.labels = v.labels;

  for (int c = 0; c < v.channels; ++c) {
    for (int j = 0; j < out.dims[1]; ++j) {
      for (int i = 0; i < out.dims[0]; ++i) {
        int coord[3];
        coord[ax] = index;
        coord[plane_axes[0]] = i;
        coord[plane_axes[1]] = j;
        out.at(c, i, j, 0) = v.at(c, coord[0], coord[1], coord[2]);
      }
    }
  }
  return out;
}

Volume stack_slices(const std::vector<Volume>& slices, Axis axis,
                    const std::array<double, 3>& voxel_size) {
  if (slices.empty()) throw ConfigError("cannot stack an empty slice list");
  const Volume& first = slices.front();
  for (const Volume& s : slices)
    if (s.dims != first.dims || s.channels != first.channels)
      throw ConfigError("inconsistent slice shapes in stack");

  const int n = static_cast<int>(slices.size());
  std::array<int, 3> dims;
  std::array<int, 2> plane_axes;
  const int ax = static_cast<int>(axis);
  switch (axis) {
    case Axis::X: plane_axes = {1, 2}; break;
    case Axis::Y: plane_axes = {0, 2}; break;
    case Axis::Z: plane_axes = {0, 1}; break;
  }
  dims[ax] = n;
  dims[plane_axes[0]] = first.dims[0];
  dims[plane_axes[1]] = first.dims[1];

  Volume out(dims, first.channels);
  out.voxel_size = voxel_size;
  out.labels = first.labels;
  for (int k = 0; k < n; ++k) {
    const Volume& s = slices[k];
    for (int c = 0; c < s.channels; ++c)
      for (int j = 0; j < s.dims[1]; ++j)
        for (int i = 0; i < s.dims[0]; ++i) {
          int coord[3];
          coord[ax] = k;
          coord[plane_axes[0]] = i;
          coord[plane_axes[1]] = j;
          out.at(c, coord[0], coord[1], coord[2]) = s.at(c, i, j, 0);
        }
  }
  return out;
}

} // namespace mbd

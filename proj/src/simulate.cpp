#include "mbd/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <iostream>
#include <sstream>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"
#include "mbd/parallel.hpp"
#include "mbd/rng.hpp"

namespace mbd {

namespace {

constexpr double kLesionBlurSigma = 0.7;
constexpr double kLesionNormTarget = 3.5;
constexpr int kPlacementAttempts = 200;
constexpr double kDiffusivityUnit = 1e-3; // stored D is in 1e-3 mm^2/s

std::string format_bvalue_label(double b) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "b=%.10g", b);
  return buf;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Fuzzy stamp: blurred, rescaled and clipped lesion shape in a padded box.
struct LesionStamp {
  int width = 0;
  int height = 0;
  std::vector<double> value; // in [0,1], 0 outside support
};

LesionStamp fuzzify_shape(const LesionShape& shape) {
  const std::vector<double> kernel = gaussian_kernel(kLesionBlurSigma);
  const int radius = static_cast<int>(kernel.size() / 2);

  LesionStamp s;
  s.width = shape.width + 2 * radius;
  s.height = shape.height + 2 * radius;
  std::vector<double> padded(static_cast<std::size_t>(s.width) * s.height, 0.0);
  double mean_pre_blur = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < shape.height; ++y)
    for (int x = 0; x < shape.width; ++x)
      if (shape.mask[static_cast<std::size_t>(y) * shape.width + x]) {
        padded[static_cast<std::size_t>(y + radius) * s.width + (x + radius)] = 1.0;
        mean_pre_blur += 1.0;
        ++count;
      }
  if (count == 0) throw ConfigError("lesion shape has empty mask");
  mean_pre_blur /= static_cast<double>(count);

  // separable blur
  std::vector<double> tmp(padded.size(), 0.0);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < s.width) acc += kernel[i + radius] * padded[static_cast<std::size_t>(y) * s.width + xx];
      }
      tmp[static_cast<std::size_t>(y) * s.width + x] = acc;
    }
  s.value.assign(padded.size(), 0.0);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < s.height) acc += kernel[i + radius] * tmp[static_cast<std::size_t>(yy) * s.width + x];
      }
      // normalize so the mean pre-blur intensity maps to 3.5, then clip;
      // the clipped plateau yields voxels with 100% lesion fraction
      double v = std::min(1.0, acc * kLesionNormTarget / mean_pre_blur);
      if (v < 1e-3) v = 0.0; // drop sub-0.1% kernel tails: keeps supports compact
      s.value[static_cast<std::size_t>(y) * s.width + x] = v;
    }

  // crop away all-zero margins so placement constraints track the support
  int min_x = s.width, max_x = -1, min_y = s.height, max_y = -1;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      if (s.value[static_cast<std::size_t>(y) * s.width + x] > 0.0) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
  if (max_x < 0) throw NumericError("lesion stamp vanished after normalization");
  LesionStamp cropped;
  cropped.width = max_x - min_x + 1;
  cropped.height = max_y - min_y + 1;
  cropped.value.resize(static_cast<std::size_t>(cropped.width) * cropped.height);
  for (int y = 0; y < cropped.height; ++y)
    for (int x = 0; x < cropped.width; ++x)
      cropped.value[static_cast<std::size_t>(y) * cropped.width + x] =
          s.value[static_cast<std::size_t>(y + min_y) * s.width + (x + min_x)];
  return cropped;
}

} // namespace

// --- protocol / parameter validation ------------------------------------

void AcquisitionProtocol::validate() const {
  if (k <= 0 || TR <= 0 || TE <= 0) throw ConfigError("k, TR, TE must be positive");
  if (bvalues.empty()) throw ConfigError("protocol needs at least one b-value");
  for (std::size_t i = 0; i < bvalues.size(); ++i) {
    if (bvalues[i] < 0) throw ConfigError("b-values must be >= 0");
    if (i > 0 && bvalues[i] <= bvalues[i - 1])
      throw ConfigError("b-values must be strictly ascending");
  }
  for (const Direction& g : directions) {
    const double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    if (std::abs(norm - 1.0) > 1e-9)
      throw ConfigError("diffusion directions must have unit norm");
  }
  if (sigma < 0) throw ConfigError("sigma must be >= 0");
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
}

void LesionParams::validate() const {
  if (f < 0.0 || f > 1.0) throw ConfigError("lesion fraction f must be in [0,1]");
  for (double d : {D1, D2})
    if (d < 0.3 || d >= 1.35)
      throw ConfigError("lesion diffusivities must lie in [0.3, 1.35)");
  const double steps = dT2 / 5.0;
  if (std::abs(steps - std::round(steps)) > 1e-9 || std::abs(dT2) > 30.0 + 1e-9)
    throw ConfigError("lesion dT2 must be a multiple of 5 in [-30, 30]");
}

void LesionField::validate(const Mask& wm_binary) const {
  fraction.validate();
  if (fraction.dims != wm_binary.dims) throw ConfigError("lesion field dims do not match phantom");
  if (owner.size() != fraction.size()) throw ConfigError("lesion owner map size mismatch");
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (fraction.data[i] > 0.0f) {
      if (owner[i] < 0 || owner[i] >= static_cast<std::int32_t>(lesions.size()))
        throw ConfigError("lesion voxel without valid owner");
      if (wm_binary.data[i] < 0.5f)
        throw ConfigError("lesion support leaves the WM binary mask");
    }
  }
  for (const LesionParams& p : lesions) p.validate();
}

void LesionField::set_all_params(const LesionParams& p) {
  for (LesionParams& lp : lesions) {
    lp.f = p.f;
    lp.D1 = p.D1;
    lp.D2 = p.D2;
    lp.dT2 = p.dT2;
  }
}

std::size_t LesionShape::area() const {
  std::size_t n = 0;
  for (auto v : mask) n += v ? 1 : 0;
  return n;
}

bool LesionShape::connected() const {
  const std::size_t total = area();
  if (total == 0) return false;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < height && queue.empty(); ++y)
    for (int x = 0; x < width && queue.empty(); ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) {
        queue.emplace_back(x, y);
        seen[static_cast<std::size_t>(y) * width + x] = 1;
      }
  std::size_t reached = 0;
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    ++reached;
    const int nbr[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& d : nbr) {
      const int xx = x + d[0], yy = y + d[1];
      if (xx < 0 || yy < 0 || xx >= width || yy >= height) continue;
      const std::size_t idx = static_cast<std::size_t>(yy) * width + xx;
      if (mask[idx] && !seen[idx]) {
        seen[idx] = 1;
        queue.emplace_back(xx, yy);
      }
    }
  }
  return reached == total;
}

// --- signal model --------------------------------------------------------

double steady_state_factor(const TissueParams& tissue, const AcquisitionProtocol& proto,
                           double dT2) {
  const double t2_eff = tissue.T2 + dT2;
  if (t2_eff <= 0.0)
    throw NumericError("effective T2 is nonpositive (T2=" + std::to_string(tissue.T2) +
                       ", dT2=" + std::to_string(dT2) + ")");
  return proto.k * tissue.rho * std::exp(-proto.TE / t2_eff) *
         (1.0 - std::exp(-proto.TR / tissue.T1));
}

double directional_diffusivity(const SymTensor3& t, const Direction& g) {
  const double norm2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-9)
    throw ConfigError("direction must be a unit vector");
  const double d = t[0] * g[0] * g[0] + t[1] * g[1] * g[1] + t[2] * g[2] * g[2] +
                   2.0 * (t[3] * g[0] * g[1] + t[4] * g[0] * g[2] + t[5] * g[1] * g[2]);
  if (d < -1e-12) throw NumericError("directional diffusivity below PSD tolerance");
  return std::max(d, 0.0);
}

double repulsion_energy(const std::vector<Direction>& dirs) {
  double e = 0.0;
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = i + 1; j < dirs.size(); ++j) {
      double dm = 0.0, dp = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double m = dirs[i][c] - dirs[j][c];
        const double p = dirs[i][c] + dirs[j][c];
        dm += m * m;
        dp += p * p;
      }
      e += 1.0 / std::sqrt(dm) + 1.0 / std::sqrt(dp);
    }
  return e;
}

double min_antipodal_angle_deg(const std::vector<Direction>& dirs) {
  double min_angle = 180.0;
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = i + 1; j < dirs.size(); ++j) {
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) dot += dirs[i][c] * dirs[j][c];
      dot = std::clamp(std::abs(dot), 0.0, 1.0);
      min_angle = std::min(min_angle, std::acos(dot) * 180.0 / M_PI);
    }
  return min_angle;
}

std::vector<Direction> generate_directions(int n, std::uint64_t seed, int iterations) {
  if (n < 1) throw ConfigError("direction count must be >= 1");
  RandomStream rng(seed ^ 0xd1ff0d1ff0ULL);

  std::vector<Direction> dirs(n);
  for (Direction& g : dirs) {
    // uniform on the upper hemisphere
    const double z = rng.uniform(0.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    g = {r * std::cos(phi), r * std::sin(phi), z};
  }
  if (n == 1) return dirs;

  double energy = repulsion_energy(dirs);
  double step = 0.05;
  std::vector<Direction> forces(n), trial(n);

  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) forces[i] = {0.0, 0.0, 0.0};
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        double dm2 = 0.0, dp2 = 0.0;
        Direction vm, vp;
        for (int c = 0; c < 3; ++c) {
          vm[c] = dirs[i][c] - dirs[j][c];
          vp[c] = dirs[i][c] + dirs[j][c];
          dm2 += vm[c] * vm[c];
          dp2 += vp[c] * vp[c];
        }
        const double im3 = 1.0 / (dm2 * std::sqrt(dm2));
        const double ip3 = 1.0 / (dp2 * std::sqrt(dp2));
        for (int c = 0; c < 3; ++c) {
          const double f = vm[c] * im3 + vp[c] * ip3;
          forces[i][c] += f;
          forces[j][c] -= vm[c] * im3 - vp[c] * ip3;
        }
      }
    double max_force = 0.0;
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) dot += forces[i][c] * dirs[i][c];
      double norm2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        forces[i][c] -= dot * dirs[i][c]; // tangential component only
        norm2 += forces[i][c] * forces[i][c];
      }
      max_force = std::max(max_force, std::sqrt(norm2));
    }
    if (max_force < 1e-12) break;

    bool accepted = false;
    double s = step;
    for (int bt = 0; bt < 40; ++bt) {
      for (int i = 0; i < n; ++i) {
        double norm2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          trial[i][c] = dirs[i][c] + s / max_force * forces[i][c];
          norm2 += trial[i][c] * trial[i][c];
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (int c = 0; c < 3; ++c) trial[i][c] *= inv;
      }
      const double trial_energy = repulsion_energy(trial);
      if (trial_energy <= energy) {
        dirs = trial;
        energy = trial_energy;
        step = std::min(s * 1.3, 0.5);
        accepted = true;
        break;
      }
      s *= 0.5;
    }
    if (!accepted) break; // converged: no descent direction at any step size
  }

  for (Direction& g : dirs)
    if (g[2] < 0.0)
      for (double& c : g) c = -c;
  return dirs;
}

// --- synthesis -------------------------------------------------------------

Volume simulate_clean(const Phantom& phantom, const LesionField* lesions,
                      const AcquisitionProtocol& proto, int direction_index, int threads) {
  proto.validate();
  if (direction_index < 0 || direction_index >= static_cast<int>(proto.directions.size()))
    throw ConfigError("direction index out of range");
  if (lesions) lesions->validate(phantom.wm_binary);

  const auto dims = phantom.dims();
  const Direction g = proto.directions[direction_index];
  const int nb = static_cast<int>(proto.bvalues.size());

  const double ss_csf = steady_state_factor(phantom.params.csf, proto);
  const double ss_gm = steady_state_factor(phantom.params.gm, proto);
  const double ss_wm = steady_state_factor(phantom.params.wm, proto);

  // lesion signal per (lesion, b): steady-state with shifted T2 times the
  // biexponential attenuation
  std::vector<double> lesion_signal;
  if (lesions) {
    lesion_signal.resize(lesions->lesions.size() * nb);
    for (std::size_t l = 0; l < lesions->lesions.size(); ++l) {
      const LesionParams& lp = lesions->lesions[l];
      const double ss = steady_state_factor(phantom.params.wm, proto, lp.dT2);
      for (int bi = 0; bi < nb; ++bi) {
        const double b = proto.bvalues[bi] * kDiffusivityUnit;
        lesion_signal[l * nb + bi] =
            ss * (lp.f * std::exp(-b * lp.D1) + (1.0 - lp.f) * std::exp(-b * lp.D2));
      }
    }
  }

  Volume out(dims, nb);
  out.labels.clear();
  for (double b : proto.bvalues) out.labels.push_back(format_bvalue_label(b));

  parallel_for(0, dims[2], threads, [&](int z) {
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::size_t vox = phantom.csf.index(x, y, z);
        const double healthy_base = phantom.csf.data[vox] * ss_csf +
                                    phantom.gm.data[vox] * ss_gm +
                                    phantom.wm.data[vox] * ss_wm;
        double lesion_frac = 0.0;
        const double* les_sig = nullptr;
        if (lesions && lesions->fraction.data[vox] > 0.0f) {
          lesion_frac = lesions->fraction.data[vox];
          les_sig = &lesion_signal[static_cast<std::size_t>(lesions->owner[vox]) * nb];
        }
        const double dk = directional_diffusivity(phantom.tensor_at(x, y, z), g);
        for (int bi = 0; bi < nb; ++bi) {
          const double att = std::exp(-proto.bvalues[bi] * kDiffusivityUnit * dk);
          double s = (1.0 - lesion_frac) * healthy_base * att;
          if (les_sig) s += lesion_frac * les_sig[bi];
          out.at(bi, x, y, z) = static_cast<float>(s);
        }
      }
  });

  return out;
}

Volume add_rician_noise(const Volume& clean, double sigma, std::uint64_t seed, int threads) {
  clean.validate();
  if (sigma < 0) throw ConfigError("sigma must be >= 0");

  Volume out = clean;
  const auto& dims = clean.dims;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);

  parallel_for(0, dims[2], threads, [&](int z) {
    RandomStream rng = RandomStream::substream(seed, static_cast<std::uint64_t>(z));
    for (int c = 0; c < clean.channels; ++c)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          double n1, n2;
          rng.normal_pair(n1, n2);
          const double s = clean.at(c, x, y, z) * inv_sqrt2;
          const double re = s + sigma * n1;
          const double im = s + sigma * n2;
          out.at(c, x, y, z) = static_cast<float>(std::sqrt(re * re + im * im));
        }
  });
  return out;
}

// --- lesion shapes ---------------------------------------------------------

LesionShape rasterize_ellipse(double a, double b, double angle,
                              const std::array<double, 4>& harmonics) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int reach = static_cast<int>(std::ceil(std::max(a, b) * 1.4)) + 1;
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(2 * reach + 1) * (2 * reach + 1), 0);
  int min_x = reach, max_x = -reach, min_y = reach, max_y = -reach;
  for (int y = -reach; y <= reach; ++y)
    for (int x = -reach; x <= reach; ++x) {
      const double u = (x * ca + y * sa) / a;
      const double v = (-x * sa + y * ca) / b;
      const double r = std::sqrt(u * u + v * v);
      const double theta = std::atan2(v, u);
      const double boundary = 1.0 + harmonics[0] * std::cos(theta) + harmonics[1] * std::sin(theta) +
                              harmonics[2] * std::cos(2.0 * theta) + harmonics[3] * std::sin(2.0 * theta);
      if (r <= boundary) {
        grid[static_cast<std::size_t>(y + reach) * (2 * reach + 1) + (x + reach)] = 1;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
  if (min_x > max_x) throw NumericError("degenerate lesion shape rasterization");

  LesionShape s;
  s.width = max_x - min_x + 1;
  s.height = max_y - min_y + 1;
  s.mask.assign(static_cast<std::size_t>(s.width) * s.height, 0);
  for (int y = min_y; y <= max_y; ++y)
    for (int x = min_x; x <= max_x; ++x)
      s.mask[static_cast<std::size_t>(y - min_y) * s.width + (x - min_x)] =
          grid[static_cast<std::size_t>(y + reach) * (2 * reach + 1) + (x + reach)];
  return s;
}

std::vector<LesionShape> generate_lesion_shapes(int n, std::array<int, 2> size_range,
                                                std::array<double, 2> elongation_range,
                                                std::uint64_t seed) {
  if (n < 1) throw ConfigError("shape count must be >= 1");
  if (size_range[0] < 4 || size_range[1] > 21 || size_range[0] > size_range[1])
    throw ConfigError("lesion shape sizes must lie within [4, 21] voxels per side");
  if (elongation_range[0] < 1.0 || elongation_range[1] < elongation_range[0])
    throw ConfigError("invalid elongation range");

  RandomStream rng(seed ^ 0x1e510eULL);
  std::vector<LesionShape> shapes;
  shapes.reserve(n);
  for (int i = 0; i < n; ++i) {
    // alternate round and elongated classes
    const bool elongated = (i % 2) == 1;
    for (int attempt = 0;; ++attempt) {
      const double target = static_cast<double>(rng.uniform_int(size_range[0], size_range[1]));
      const double elong = elongated
                               ? rng.uniform(std::max(1.8, elongation_range[0]),
                                             std::max(1.8, elongation_range[1]))
                               : rng.uniform(1.0, std::min(1.3, elongation_range[1]));
      const double a = std::clamp(0.5 * (target - 1.0), 2.0, 10.0);
      const double b = std::max(2.0, a / elong);
      const double angle = rng.uniform(0.0, M_PI);
      std::array<double, 4> harmonics{0, 0, 0, 0};
      if (attempt < 50) // fall back to a pure ellipse when blobs will not fit
        for (double& h : harmonics) h = rng.uniform(-0.10, 0.10);

      LesionShape s = rasterize_ellipse(a, b, angle, harmonics);
      const bool size_ok = s.width >= 4 && s.width <= 21 && s.height >= 4 && s.height <= 21 &&
                           std::max(s.width, s.height) <= size_range[1] + 2;
      if (size_ok && s.connected()) {
        shapes.push_back(std::move(s));
        break;
      }
      if (attempt > 200) throw NumericError("could not rasterize a valid lesion shape");
    }
  }
  return shapes;
}

// --- lesion insertion --------------------------------------------------------

LesionParams sample_lesion_params(RandomStream& rng) {
  LesionParams p;
  p.f = rng.uniform(0.0, 1.0);
  p.D1 = rng.uniform(0.3, 1.35);
  p.D2 = rng.uniform(0.3, 1.35);
  p.dT2 = -30.0 + 5.0 * static_cast<double>(rng.uniform_int(0, 12));
  return p;
}

LesionParams sample_lesion_params(std::uint64_t seed) {
  RandomStream rng(seed ^ 0x9a9a33ULL);
  return sample_lesion_params(rng);
}

LesionField insert_lesions(const Phantom& phantom, const std::vector<LesionShape>& shapes,
                           std::array<int, 2> count_range, std::uint64_t seed,
                           std::optional<std::array<int, 2>> slice_range) {
  if (shapes.empty()) throw ConfigError("lesion shape pool is empty");
  if (count_range[0] < 0 || count_range[1] < count_range[0])
    throw ConfigError("invalid lesion count range");

  const auto dims = phantom.dims();
  bool any_wm = false;
  for (float v : phantom.wm_binary.data)
    if (v > 0.5f) {
      any_wm = true;
      break;
    }
  if (!any_wm) throw ConfigError("WM binary mask is empty; cannot place lesions");

  int z_lo = 0, z_hi = dims[2] - 1;
  if (slice_range) {
    z_lo = (*slice_range)[0];
    z_hi = (*slice_range)[1];
    if (z_lo < 0 || z_hi >= dims[2] || z_lo > z_hi) throw ConfigError("lesion slice range out of bounds");
  }

  // fuzzy stamps are shared across slices
  std::vector<LesionStamp> stamps;
  stamps.reserve(shapes.size());
  for (const LesionShape& s : shapes) stamps.push_back(fuzzify_shape(s));

  LesionField field;
  field.fraction = Mask(dims);
  field.owner.assign(field.fraction.size(), -1);

  int total_wanted = 0, total_placed = 0;
  for (int z = z_lo; z <= z_hi; ++z) {
    RandomStream rng = RandomStream::substream(seed ^ 0x1e51050ULL, static_cast<std::uint64_t>(z));
    int want = static_cast<int>(rng.uniform_int(count_range[0], count_range[1]));
    if (want == 0) continue;
    if (static_cast<std::size_t>(want) > shapes.size())
      throw ConfigError("shape pool provides fewer masks than the requested lesion count");

    // draw shapes without replacement
    std::vector<int> order(shapes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<std::int64_t>(i) - 1)]);

    int placed = 0;
    for (int li = 0; li < want; ++li) {
      const int shape_id = order[li];
      const LesionStamp& stamp = stamps[shape_id];
      if (stamp.width > dims[0] || stamp.height > dims[1]) continue;

      bool ok = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
        const int ox = static_cast<int>(rng.uniform_int(0, dims[0] - stamp.width));
        const int oy = static_cast<int>(rng.uniform_int(0, dims[1] - stamp.height));
        ok = true;
        for (int sy = 0; sy < stamp.height && ok; ++sy)
          for (int sx = 0; sx < stamp.width && ok; ++sx) {
            if (stamp.value[static_cast<std::size_t>(sy) * stamp.width + sx] <= 0.0) continue;
            const std::size_t vox = field.fraction.index(ox + sx, oy + sy, z);
            if (phantom.wm_binary.data[vox] < 0.5f || field.owner[vox] >= 0) ok = false;
          }
        if (!ok) continue;

        const std::int32_t lesion_index = static_cast<std::int32_t>(field.lesions.size());
        for (int sy = 0; sy < stamp.height; ++sy)
          for (int sx = 0; sx < stamp.width; ++sx) {
            const double v = stamp.value[static_cast<std::size_t>(sy) * stamp.width + sx];
            if (v <= 0.0) continue;
            const std::size_t vox = field.fraction.index(ox + sx, oy + sy, z);
            field.fraction.data[vox] = static_cast<float>(v);
            field.owner[vox] = lesion_index;
          }
        LesionParams params = sample_lesion_params(rng);
        params.shape_id = shape_id;
        params.position = {ox, oy, z};
        field.lesions.push_back(params);
        ++placed;
      }
    }
    total_wanted += want;
    total_placed += placed;
  }
  if (total_placed < total_wanted)
    std::cerr << "[mbd] warning: placed " << total_placed << " of " << total_wanted
              << " requested lesions (WM region too crowded for the rest)\n";

  field.validate(phantom.wm_binary);
  return field;
}

// --- lesion field IO --------------------------------------------------------

void save_lesion_field(const LesionField& field, const std::string& base_path) {
  Volume v(field.fraction.dims, 2);
  v.labels = {"lesion_fraction", "lesion_owner"};
  const std::size_t n = field.fraction.size();
  for (std::size_t i = 0; i < n; ++i) {
    v.data[i] = field.fraction.data[i];
    v.data[n + i] = static_cast<float>(field.owner[i]);
  }
  save_volume(v, base_path);

  std::ostringstream tsv;
  tsv << "id\tf\tD1\tD2\tdT2\tshape_id\tpos_x\tpos_y\tpos_z\n";
  char buf[256];
  for (std::size_t i = 0; i < field.lesions.size(); ++i) {
    const LesionParams& p = field.lesions[i];
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g\t%.17g\t%.17g\t%d\t%d\t%d\t%d\n", i, p.f,
                  p.D1, p.D2, p.dT2, p.shape_id, p.position[0], p.position[1], p.position[2]);
    tsv << buf;
  }
  write_text_file(base_path + ".lesions.tsv", tsv.str());
}

LesionField load_lesion_field(const std::string& base_path) {
  const Volume v = load_volume(base_path);
  if (v.channels != 2) throw IoError("lesion field volume must have 2 channels");

  LesionField field;
  field.fraction = Mask(v.dims);
  const std::size_t n = field.fraction.size();
  field.owner.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    field.fraction.data[i] = v.data[i];
    field.owner[i] = static_cast<std::int32_t>(v.data[n + i]);
  }

  std::istringstream tsv(read_text_file(base_path + ".lesions.tsv"));
  std::string line;
  std::getline(tsv, line); // header
  while (std::getline(tsv, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t id;
    LesionParams p;
    row >> id >> p.f >> p.D1 >> p.D2 >> p.dT2 >> p.shape_id >> p.position[0] >> p.position[1] >>
        p.position[2];
    if (!row) throw IoError("malformed lesion tsv row: " + line);
    if (id != field.lesions.size()) throw IoError("lesion tsv rows out of order");
    field.lesions.push_back(p);
  }
  return field;
}

} // namespace mbd

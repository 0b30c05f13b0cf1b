#include "mbd/phantom.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"
#include "mbd/parallel.hpp"
#include "mbd/rng.hpp"

namespace mbd {

namespace {

namespace fs = std::filesystem;

Eigen::Matrix3d to_matrix(const SymTensor3& t) {
  Eigen::Matrix3d m;
  m << t[0], t[3], t[4],
       t[3], t[1], t[5],
       t[4], t[5], t[2];
  return m;
}

// Smooth pseudo-random scalar field: a small bank of random-phase cosine
// plane waves over normalized coordinates. Cheap, seed-stable, C-infinity.
class WaveField {
public:
  WaveField(std::uint64_t seed, int n_waves, double freq_lo, double freq_hi) {
    RandomStream rng(seed);
    waves_.resize(n_waves);
    for (auto& w : waves_) {
      const double f = rng.uniform(freq_lo, freq_hi);
      // random direction on the sphere
      double z = rng.uniform(-1.0, 1.0);
      double phi = rng.uniform(0.0, 2.0 * M_PI);
      double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      w.k = {f * r * std::cos(phi), f * r * std::sin(phi), f * z};
      w.phase = rng.uniform(0.0, 2.0 * M_PI);
      w.amp = 1.0 / n_waves;
    }
  }

  double operator()(double x, double y, double z) const {
    double v = 0.0;
    for (const auto& w : waves_)
      v += w.amp * std::cos(w.k[0] * x + w.k[1] * y + w.k[2] * z + w.phase);
    return v;
  }

private:
  struct Wave {
    std::array<double, 3> k;
    double phase;
    double amp;
  };
  std::vector<Wave> waves_;
};

double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

SymTensor3 isotropic(double d) { return {d, d, d, 0.0, 0.0, 0.0}; }

SymTensor3 axial_tensor(const std::array<double, 3>& e1, double lam_par, double lam_perp) {
  // lam_perp * I + (lam_par - lam_perp) * e1 e1^T
  const double d = lam_par - lam_perp;
  return {lam_perp + d * e1[0] * e1[0],
          lam_perp + d * e1[1] * e1[1],
          lam_perp + d * e1[2] * e1[2],
          d * e1[0] * e1[1],
          d * e1[0] * e1[2],
          d * e1[1] * e1[2]};
}

} // namespace

void TissueSet::validate() const {
  for (const TissueParams* t : {&csf, &gm, &wm}) {
    if (t->rho <= 0 || t->T1 <= 0 || t->T2 <= 0)
      throw ConfigError("tissue parameters must be positive");
    if (t->rho > 1.0 + 1e-12)
      throw ConfigError("proton density is relative to CSF and must be <= 1");
  }
  if (std::abs(csf.rho - 1.0) > 1e-12)
    throw ConfigError("CSF proton density must be exactly 1");
}

SymTensor3 Phantom::tensor_at(int x, int y, int z) const {
  SymTensor3 t;
  for (int c = 0; c < 6; ++c) t[c] = tensor.at(c, x, y, z);
  return t;
}

double min_tensor_eigenvalue(const SymTensor3& t) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(to_matrix(t), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

void Phantom::validate() const {
  params.validate();
  csf.validate();
  gm.validate();
  wm.validate();
  wm_binary.validate();
  tensor.validate();
  if (tensor.channels != 6) throw ConfigError("tensor volume must have 6 channels");
  if (csf.dims != gm.dims || csf.dims != wm.dims || csf.dims != tensor.dims || csf.dims != wm_binary.dims)
    throw ConfigError("phantom component dims disagree");

  const std::size_t n = csf.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double sum = static_cast<double>(csf.data[i]) + gm.data[i] + wm.data[i];
    if (sum > 1.0 + 1e-6)
      throw NumericError("tissue fractions sum to " + std::to_string(sum) + " > 1 at voxel " +
                         std::to_string(i));
  }
  // PSD spot check on a deterministic subsample; full sweep is done at load.
  for (int z = 0; z < dims()[2]; z += std::max(1, dims()[2] / 8))
    for (int y = 0; y < dims()[1]; y += std::max(1, dims()[1] / 8))
      for (int x = 0; x < dims()[0]; x += std::max(1, dims()[0] / 8))
        if (min_tensor_eigenvalue(tensor_at(x, y, z)) < -1e-12)
          throw NumericError("diffusion tensor not PSD at sampled voxel");
}

Phantom generate_procedural_phantom(std::array<int, 3> dims, std::uint64_t seed) {
  if (dims[0] < 32 || dims[1] < 32 || dims[2] < 32)
    throw ConfigError("procedural phantom requires >= 32 voxels per axis");

  Phantom p;
  p.csf = Mask(dims);
  p.gm = Mask(dims);
  p.wm = Mask(dims);
  p.wm_binary = Mask(dims);
  p.tensor = Volume(dims, 6);
  p.tensor.labels = {"Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz"};

  const WaveField wobble(seed, 6, 2.0, 5.0);       // boundary perturbation
  const WaveField fiber_x(seed ^ 0xa5a5a5a5ULL, 5, 1.5, 4.0);
  const WaveField fiber_y(seed ^ 0x5a5a5a5aULL, 5, 1.5, 4.0);
  const WaveField fiber_z(seed ^ 0x3c3c3c3cULL, 5, 1.5, 4.0);

  const double cx = 0.5 * (dims[0] - 1), cy = 0.5 * (dims[1] - 1), cz = 0.5 * (dims[2] - 1);
  const double ax = 0.42 * dims[0], ay = 0.45 * dims[1], az = 0.42 * dims[2];

  // GM shell over a WM interior; CSF sits in a butterfly-shaped ventricle
  // pair pushed into the +y half so the WM bulk stays wide enough to host
  // lesions at desk scale.
  const double r_gm_inner = 0.80, r_brain = 1.0;
  const double edge = 0.045;
  const double vent_ax = 0.10 * dims[0], vent_ay = 0.13 * dims[1], vent_az = 0.12 * dims[2];
  const double vent_off_x = 0.10 * dims[0], vent_off_y = 0.14 * dims[1];

  // Diffusivities in 1e-3 mm^2/s.
  const double d_csf = 3.0, d_gm = 0.8, wm_par = 1.7, wm_perp = 0.3;

  parallel_for(0, dims[2], 1, [&](int z) {
    for (int y = 0; y < dims[1]; ++y) {
      for (int x = 0; x < dims[0]; ++x) {
        const double ux = (x - cx) / ax, uy = (y - cy) / ay, uz = (z - cz) / az;
        const double nx = (x - cx) / dims[0], ny = (y - cy) / dims[1], nz = (z - cz) / dims[2];
        const double r0 = std::sqrt(ux * ux + uy * uy + uz * uz);
        const double r = r0 * (1.0 + 0.10 * wobble(8.0 * nx, 8.0 * ny, 8.0 * nz));

        double vent_r = 1e9;
        for (double side : {-1.0, 1.0}) {
          const double vx = (x - cx - side * vent_off_x) / vent_ax;
          const double vy = (y - cy - vent_off_y) / vent_ay;
          const double vz = (z - cz) / vent_az;
          vent_r = std::min(vent_r, std::sqrt(vx * vx + vy * vy + vz * vz));
        }
        vent_r *= 1.0 + 0.08 * wobble(11.0 * nx, 11.0 * ny, 11.0 * nz);

        const double in_brain = logistic((r_brain - r) / edge);
        const double in_vent = logistic((1.0 - vent_r) / edge);
        const double in_gm = logistic((r - r_gm_inner) / edge);

        const double f_csf = in_brain * in_vent;
        const double f_gm = in_brain * (1.0 - in_vent) * in_gm;
        const double f_wm = in_brain * (1.0 - in_vent) * (1.0 - in_gm);

        p.csf.at(x, y, z) = static_cast<float>(f_csf);
        p.gm.at(x, y, z) = static_cast<float>(f_gm);
        p.wm.at(x, y, z) = static_cast<float>(f_wm);
        p.wm_binary.at(x, y, z) = f_wm > kWmBinaryThreshold ? 1.0f : 0.0f;

        // WM principal direction: tangential swirl around the z axis plus
        // a smooth perturbation, so orientation varies across the volume.
        std::array<double, 3> e1{-uy, ux, 0.15};
        e1[0] += 0.35 * fiber_x(6.0 * nx, 6.0 * ny, 6.0 * nz);
        e1[1] += 0.35 * fiber_y(6.0 * nx, 6.0 * ny, 6.0 * nz);
        e1[2] += 0.35 * fiber_z(6.0 * nx, 6.0 * ny, 6.0 * nz);
        double norm = std::sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]);
        if (norm < 1e-6) {
          e1 = {1.0, 0.0, 0.0};
          norm = 1.0;
        }
        for (double& c : e1) c /= norm;

        const SymTensor3 wm_t = axial_tensor(e1, wm_par, wm_perp);
        for (int c = 0; c < 6; ++c) {
          const double iso = (c < 3) ? (f_csf * d_csf + f_gm * d_gm) : 0.0;
          p.tensor.at(c, x, y, z) = static_cast<float>(iso + f_wm * wm_t[c]);
        }
      }
    }
  });

  p.validate();
  return p;
}

void save_phantom(const Phantom& p, const std::string& dir) {
  p.validate();
  fs::create_directories(dir);
  const auto as_volume = [&](const Mask& m) {
    Volume v(m.dims, 1);
    v.data = m.data;
    return v;
  };
  save_volume(as_volume(p.csf), (fs::path(dir) / "csf").string());
  save_volume(as_volume(p.gm), (fs::path(dir) / "gm").string());
  save_volume(as_volume(p.wm), (fs::path(dir) / "wm").string());
  save_volume(p.tensor, (fs::path(dir) / "tensor").string());

  KeyValueConfig cfg;
  cfg.set_double("csf.rho", p.params.csf.rho);
  cfg.set_double("csf.T1", p.params.csf.T1);
  cfg.set_double("csf.T2", p.params.csf.T2);
  cfg.set_double("gm.rho", p.params.gm.rho);
  cfg.set_double("gm.T1", p.params.gm.T1);
  cfg.set_double("gm.T2", p.params.gm.T2);
  cfg.set_double("wm.rho", p.params.wm.rho);
  cfg.set_double("wm.T1", p.params.wm.T1);
  cfg.set_double("wm.T2", p.params.wm.T2);
  write_text_file((fs::path(dir) / "params.cfg").string(), cfg.canonical_text());
}

Phantom load_phantom(const std::string& dir) {
  const auto as_mask = [](Volume v, const char* what) {
    if (v.channels != 1) throw IoError(std::string(what) + ": fraction map must be single-channel");
    Mask m;
    m.dims = v.dims;
    m.data = std::move(v.data);
    m.validate();
    return m;
  };

  Phantom p;
  p.csf = as_mask(load_volume((fs::path(dir) / "csf").string()), "csf");
  p.gm = as_mask(load_volume((fs::path(dir) / "gm").string()), "gm");
  p.wm = as_mask(load_volume((fs::path(dir) / "wm").string()), "wm");
  p.tensor = load_volume((fs::path(dir) / "tensor").string());
  if (p.tensor.channels != 6)
    throw IoError("tensor volume must have 6 channels, found " + std::to_string(p.tensor.channels));

  const KeyValueConfig cfg = KeyValueConfig::parse_file((fs::path(dir) / "params.cfg").string());
  const auto read_tissue = [&](const char* name) {
    TissueParams t;
    t.rho = cfg.get_double(std::string(name) + ".rho");
    t.T1 = cfg.get_double(std::string(name) + ".T1");
    t.T2 = cfg.get_double(std::string(name) + ".T2");
    return t;
  };
  p.params.csf = read_tissue("csf");
  p.params.gm = read_tissue("gm");
  p.params.wm = read_tissue("wm");

  p.wm_binary = Mask(p.wm.dims);
  for (std::size_t i = 0; i < p.wm.size(); ++i)
    p.wm_binary.data[i] = p.wm.data[i] > kWmBinaryThreshold ? 1.0f : 0.0f;

  // Full PSD sweep. float32 storage can push an exact-zero eigenvalue
  // slightly negative; clamp within tolerance, reject beyond it.
  const auto d = p.dims();
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const double lam_min = min_tensor_eigenvalue(p.tensor_at(x, y, z));
        if (lam_min < -1e-5)
          throw NumericError("diffusion tensor fails PSD beyond tolerance at (" + std::to_string(x) +
                             "," + std::to_string(y) + "," + std::to_string(z) + ")");
        if (lam_min < 0.0) {
          // project onto the PSD cone; the ridge keeps the result PSD
          // after rounding back to float32
          Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(to_matrix(p.tensor_at(x, y, z)));
          const double ridge = 1e-6 * eig.eigenvalues().cwiseAbs().maxCoeff();
          Eigen::Vector3d lam = eig.eigenvalues().cwiseMax(0.0).array() + ridge;
          const Eigen::Matrix3d fixed =
              eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
          p.tensor.at(0, x, y, z) = static_cast<float>(fixed(0, 0));
          p.tensor.at(1, x, y, z) = static_cast<float>(fixed(1, 1));
          p.tensor.at(2, x, y, z) = static_cast<float>(fixed(2, 2));
          p.tensor.at(3, x, y, z) = static_cast<float>(fixed(0, 1));
          p.tensor.at(4, x, y, z) = static_cast<float>(fixed(0, 2));
          p.tensor.at(5, x, y, z) = static_cast<float>(fixed(1, 2));
        }
      }

  p.validate();
  return p;
}

} // namespace mbd

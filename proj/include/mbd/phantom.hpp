#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mbd/volume.hpp"

namespace mbd {

// Symmetric 3x3 tensor in component order Dxx, Dyy, Dzz, Dxy, Dxz, Dyz.
// Units throughout: 1e-3 mm^2/s, so b * D * 1e-3 is dimensionless for b
// in s/mm^2.
using SymTensor3 = std::array<double, 6>;

// Spin-echo constants per tissue: proton density relative to CSF, T1 and
// T2 in ms.
struct TissueParams {
  double rho = 1.0;
  double T1 = 1.0;
  double T2 = 1.0;
};

struct TissueSet {
  TissueParams csf{1.00, 2569.0, 329.0};
  TissueParams gm{0.86, 833.0, 83.0};
  TissueParams wm{0.77, 500.0, 70.0};

  void validate() const; // all positive, rho <= 1, csf.rho == 1
};

// Fuzzy tissue-fraction maps plus a per-voxel diffusion tensor field.
// The WM binary mask (fraction > 0.9) bounds lesion placement.
struct Phantom {
  Mask csf;
  Mask gm;
  Mask wm;
  Volume tensor; // 6 channels: Dxx,Dyy,Dzz,Dxy,Dxz,Dyz
  TissueSet params;
  Mask wm_binary;

  std::array<int, 3> dims() const { return tensor.dims; }
  SymTensor3 tensor_at(int x, int y, int z) const;

  // Fraction sums <= 1+1e-6 everywhere, tensors PSD (eigenvalues >= -1e-12),
  // matching dims.
  void validate() const;
};

constexpr double kWmBinaryThreshold = 0.9;

// Deterministic synthetic brain: CSF core, WM interior with spatially
// rotating anisotropic tensors, GM shell, smooth fuzzy transitions.
// Stand-in for externally converted atlas assets. Requires >= 32 voxels
// per axis.
Phantom generate_procedural_phantom(std::array<int, 3> dims, std::uint64_t seed);

// Directory layout: csf|gm|wm.f32raw/.vhdr, tensor.* (6 channels),
// params.cfg.
void save_phantom(const Phantom& p, const std::string& dir);
Phantom load_phantom(const std::string& dir);

// Smallest eigenvalue of a symmetric 3x3 tensor (PSD check helper).
double min_tensor_eigenvalue(const SymTensor3& t);

} // namespace mbd
